"""Exception hierarchy shared by every layer."""


class SharedLsmError(Exception):
    pass


class OverlappingRanges(SharedLsmError, ValueError):
    pass


class CorruptBlock(SharedLsmError):
    pass


# object store
class NotFound(SharedLsmError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class RangeOutOfBounds(SharedLsmError, IndexError):
    pass


class InjectedFailure(SharedLsmError, IOError):
    pass


# log service
class NotLeader(SharedLsmError):
    def __init__(self, log_stream_id, leader):
        super().__init__(f"log stream {log_stream_id}: not leader (leader is {leader})")
        self.log_stream_id = log_stream_id
        self.leader = leader


class QuorumUnavailable(SharedLsmError):
    pass


class Truncated(SharedLsmError):
    pass


# metadata / leases
class LeaseExpired(SharedLsmError):
    pass


class LeaseHeld(SharedLsmError):
    def __init__(self, msg, holder=None):
        super().__init__(msg)
        self.holder = holder


class BlockedByActiveTxn(SharedLsmError):
    pass


# engine
class MemTableFull(SharedLsmError):
    pass


class NonContiguousInputs(SharedLsmError, ValueError):
    pass


class ChecksumMismatch(SharedLsmError):
    pass


class SnapshotTooOld(SharedLsmError):
    pass


# gc
class StaleReports(SharedLsmError):
    def __init__(self, msg, frozen=None):
        super().__init__(msg)
        self.frozen = frozen


class PreconditionFailed(SharedLsmError):
    pass


# txn
class TxnAborted(SharedLsmError):
    pass


class WriteConflict(TxnAborted):
    pass


# simulation
class Deadlock(SharedLsmError):
    pass


class InvariantViolation(SharedLsmError):
    pass


class DomainError(SharedLsmError, ValueError):
    pass


class SimulatedCrash(SharedLsmError):
    """Raised at an armed crash point; volatile state of the crashing actor is lost."""

    def __init__(self, point):
        super().__init__(f"crash at {point}")
        self.point = point
