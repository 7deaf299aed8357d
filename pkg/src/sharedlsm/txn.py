"""Transactions: snapshot reads, per-stream commits and cross-stream 2PC.

Every write of a log stream goes through that stream's single leader.  A
transaction touching one stream commits with one CLog record.  One touching
several runs two-phase commit with the lowest stream id as coordinator: each
participant logs a Prepare carrying its rows, the coordinator logs Commit,
then the other participants log Commit.  The coordinator's Commit record is
the decision; recovery resolves in-doubt participants from it and presumes
abort otherwise.

CLog payload layout, all big-endian: tag u8 | txn_id u64 | participant
count u16 | participant ids u64* | scn u64 | row count u32 |
(tablet_id u32, row)*.  Tags: 0x01 Prepare, 0x02 Commit, 0x03 Abort, 0x04
single-stream commit.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .clock import SECOND, SimClock
from .core import Row, Scn
from .errors import QuorumUnavailable, TxnAborted, WriteConflict
from .faults import CrashPoints, points
from .logservice import EntryKind, LogService

log = logging.getLogger(__name__)

PREPARE, COMMIT, ABORT, SINGLE = 0x01, 0x02, 0x03, 0x04
LONG_TXN_TIMEOUT_MS = 60 * SECOND


@dataclass(frozen=True)
class ClogRecord:
    tag: int
    txn_id: int
    participants: tuple[int, ...]
    scn: Scn
    rows: tuple[tuple[int, Row], ...] = ()


def encode_record(rec: ClogRecord) -> bytes:
    parts = [struct.pack(">BQH", rec.tag, rec.txn_id, len(rec.participants))]
    parts.extend(struct.pack(">Q", p) for p in rec.participants)
    parts.append(struct.pack(">QI", rec.scn, len(rec.rows)))
    for tablet_id, row in rec.rows:
        parts.append(struct.pack(">I", tablet_id) + row.serialize())
    return b"".join(parts)


def decode_record(buf: bytes) -> ClogRecord:
    tag, txn_id, n = struct.unpack_from(">BQH", buf, 0)
    pos = 11
    participants = struct.unpack_from(f">{n}Q", buf, pos)
    pos += 8 * n
    scn, nrows = struct.unpack_from(">QI", buf, pos)
    pos += 12
    rows = []
    for _ in range(nrows):
        (tablet_id,) = struct.unpack_from(">I", buf, pos)
        row, pos = Row.deserialize_from(buf, pos + 4)
        rows.append((tablet_id, row))
    if tag not in (PREPARE, COMMIT, ABORT, SINGLE):
        raise ValueError(f"unknown CLog tag {tag:#x}")
    return ClogRecord(tag, txn_id, tuple(participants), scn, tuple(rows))


class TxnState(str, enum.Enum):
    ACTIVE = "active"
    PREPARING = "preparing"
    COMMITTED = "committed"
    ABORTED = "aborted"


class LongTxnPolicy(str, enum.Enum):
    ABORT = "abort"
    PROMOTE = "promote"


@dataclass
class Txn:
    txn_id: int
    read_scn: Scn
    node: int = 0
    start_time: float = 0.0
    writes: dict[int, list[tuple[int, bytes, bytes, bool]]] = field(default_factory=dict)
    state: TxnState = TxnState.ACTIVE
    promoted: bool = False
    commit_scn: Scn | None = None


class ScnAllocator:
    """Global commit-scn source.  ``current`` is the newest published scn."""

    def __init__(self, start: Scn = 0):
        self.allocated = start
        self.current = start

    def next(self) -> Scn:
        self.allocated += 1
        return self.allocated

    def publish(self, scn: Scn) -> None:
        self.current = max(self.current, scn)


ApplyFn = Callable[[int, Row], None]


class TxnManager:
    """Coordinates transactions over log streams and applies commits.

    ``stream_of`` maps a tablet to its log stream; ``apply`` installs a
    committed row into that tablet's engine.  Streams' leaders are whoever
    owns them in the log service.
    """

    def __init__(
        self,
        log_service: LogService,
        stream_of: Callable[[int], int],
        apply: ApplyFn,
        read: Callable[[int, bytes, Scn], bytes | None],
        *,
        clock: SimClock | None = None,
        crash: CrashPoints | None = None,
        policy: LongTxnPolicy = LongTxnPolicy.ABORT,
        timeout_ms: float = LONG_TXN_TIMEOUT_MS,
        scn: ScnAllocator | None = None,
    ):
        self.log = log_service
        self.stream_of = stream_of
        self.apply = apply
        self.read_fn = read
        self.clock = clock or SimClock()
        self.crash = points(crash)
        self.policy = LongTxnPolicy(policy)
        self.timeout_ms = timeout_ms
        self.scn = scn or ScnAllocator()
        self.active: dict[int, Txn] = {}
        self.last_write: dict[tuple[int, bytes], Scn] = {}
        self._next_id = 1
        self._min_read_hw = 0
        self.acked: list[tuple[int, Scn]] = []

    # -- lifecycle ---------------------------------------------------------
    def begin(self, node: int = 0) -> Txn:
        txn = Txn(self._next_id, self.scn.current, node, self.clock.now())
        self._next_id += 1
        self.active[txn.txn_id] = txn
        return txn

    def write(self, txn: Txn, tablet_id: int, key: bytes, value: bytes = b"", *, delete: bool = False) -> None:
        self._require_active(txn)
        ls = self.stream_of(tablet_id)
        self.active[txn.txn_id].writes.setdefault(ls, []).append((tablet_id, key, b"" if delete else value, delete))

    def read_txn(self, txn: Txn, tablet_id: int, key: bytes) -> bytes | None:
        self._require_active(txn)
        return self.read_fn(tablet_id, key, txn.read_scn)

    def _require_active(self, txn: Txn) -> None:
        if txn.state is not TxnState.ACTIVE:
            raise TxnAborted(f"txn {txn.txn_id} is {txn.state.value}")

    def _finish(self, txn: Txn, state: TxnState) -> None:
        txn.state = state
        self.active.pop(txn.txn_id, None)

    def abort(self, txn: Txn) -> None:
        self._finish(txn, TxnState.ABORTED)

    def _rows(self, txn: Txn, ls: int, scn: Scn) -> list[tuple[int, Row]]:
        # ordered by (tablet, key) so every commit locks in one global order
        latest: dict[tuple[int, bytes], tuple[bytes, bool]] = {}
        for tablet_id, key, value, tomb in txn.writes[ls]:
            latest[(tablet_id, key)] = (value, tomb)
        return [(t, Row(k, v, scn, tomb)) for (t, k), (v, tomb) in sorted(latest.items())]

    def _check_conflicts(self, txn: Txn) -> None:
        for ls, writes in txn.writes.items():
            for tablet_id, key, _, _ in writes:
                if self.last_write.get((tablet_id, key), 0) > txn.read_scn:
                    self.abort(txn)
                    raise WriteConflict(f"txn {txn.txn_id}: {key!r} changed after scn {txn.read_scn}")

    def _append(self, ls: int, rec: ClogRecord) -> range:
        return self.log.append(ls, [encode_record(rec)], EntryKind.CLOG, rec.scn, writer=self.log.owner(ls))

    def _install(self, rows: Iterable[tuple[int, Row]]) -> None:
        for tablet_id, row in rows:
            self.apply(tablet_id, row)
            self.last_write[(tablet_id, row.key)] = row.commit_scn

    def commit(self, txn: Txn) -> Scn:
        """Commit and return the commit scn; raises TxnAborted on failure."""
        self._require_active(txn)
        if not txn.writes:
            self._finish(txn, TxnState.COMMITTED)
            txn.commit_scn = txn.read_scn
            return txn.read_scn
        self._check_conflicts(txn)
        streams = sorted(txn.writes)
        if len(streams) == 1:
            return self._commit_single(txn, streams[0])
        return self._commit_2pc(txn, streams)

    def _commit_single(self, txn: Txn, ls: int) -> Scn:
        scn = self.scn.next()
        rows = self._rows(txn, ls, scn)
        try:
            self._append(ls, ClogRecord(SINGLE, txn.txn_id, (ls,), scn, tuple(rows)))
        except QuorumUnavailable as exc:
            self.abort(txn)
            raise TxnAborted(f"txn {txn.txn_id}: {exc}") from exc
        self.crash.hit("single.after_clog")
        self._install(rows)
        self.scn.publish(scn)
        txn.commit_scn = scn
        self._finish(txn, TxnState.COMMITTED)
        self.acked.append((txn.txn_id, scn))
        return scn

    def _commit_2pc(self, txn: Txn, streams: Sequence[int]) -> Scn:
        parts = tuple(streams)
        coord = parts[0]
        txn.state = TxnState.PREPARING
        prepared = []
        prepare_scns = []
        for i, ls in enumerate(parts):
            self.crash.hit(f"2pc.before_prepare_{i}")
            pscn = self.scn.next()
            rows = self._rows(txn, ls, 0)
            try:
                self._append(ls, ClogRecord(PREPARE, txn.txn_id, parts, pscn, tuple(rows)))
            except QuorumUnavailable as exc:
                self._abort_everywhere(txn, parts, prepared)
                raise TxnAborted(f"txn {txn.txn_id}: prepare failed on stream {ls}: {exc}") from exc
            prepared.append(ls)
            prepare_scns.append(pscn)
            self.crash.hit(f"2pc.after_prepare_{i}")
        commit_scn = max(prepare_scns)
        self._append(coord, ClogRecord(COMMIT, txn.txn_id, parts, commit_scn))
        self.crash.hit("2pc.after_coordinator_commit")
        for i, ls in enumerate(parts[1:], start=1):
            self._append(ls, ClogRecord(COMMIT, txn.txn_id, parts, commit_scn))
            self.crash.hit(f"2pc.after_commit_{i}")
        for ls in parts:
            self._install(self._rows(txn, ls, commit_scn))
        self.scn.publish(commit_scn)
        txn.commit_scn = commit_scn
        self._finish(txn, TxnState.COMMITTED)
        self.acked.append((txn.txn_id, commit_scn))
        return commit_scn

    def _abort_everywhere(self, txn: Txn, parts: tuple[int, ...], prepared: Sequence[int]) -> None:
        for ls in sorted(set(prepared) | {parts[0]}):
            try:
                self._append(ls, ClogRecord(ABORT, txn.txn_id, parts, 0))
            except QuorumUnavailable:
                log.info("abort record for txn %s not logged on %s; recovery presumes abort", txn.txn_id, ls)
        self.abort(txn)

    # -- read-scn accounting -------------------------------------------------
    def report_min_read_scn(self, node: int) -> Scn:
        reads = [t.read_scn for t in self.active.values() if t.node == node]
        return min(reads) if reads else self.scn.current

    def aggregate_min_read_scn(self, nodes: Iterable[int] | None = None) -> Scn:
        nodes = set(nodes) if nodes is not None else {t.node for t in self.active.values()}
        reports = [self.report_min_read_scn(n) for n in nodes] or [self.scn.current]
        self._min_read_hw = max(self._min_read_hw, min(reports))
        return self._min_read_hw

    def handle_long_txns(self, now: float | None = None) -> dict[int, str]:
        now = self.clock.now() if now is None else now
        out = {}
        for txn in list(self.active.values()):
            if now - txn.start_time <= self.timeout_ms:
                continue
            if self.policy is LongTxnPolicy.ABORT:
                self.abort(txn)
                out[txn.txn_id] = "aborted"
            else:
                txn.read_scn = self.scn.current
                txn.promoted = True
                txn.start_time = now
                out[txn.txn_id] = "promoted"
        return out


# -- replay and recovery ----------------------------------------------------------


class ClogReplayer:
    """Applies one stream's committed CLog to tablets, resolving 2PC records.

    Prepared rows are held until the stream's own Commit record; a stream
    whose log ends in doubt stays pending until :func:`resolve_in_doubt`.
    """

    def __init__(self, log_service: LogService, log_stream_id: int, apply: ApplyFn, from_lsn: int = 0):
        self.log = log_service
        self.ls = log_stream_id
        self.apply = apply
        self.replayed_lsn = from_lsn
        self.pending: dict[int, ClogRecord] = {}
        self.decided: dict[int, tuple[int, Scn]] = {}
        self.max_scn: Scn = 0

    def poll(self, replica: int | None = None) -> int:
        n = 0
        for entry in self.log.read_iter(self.ls, self.replayed_lsn, replica):
            if entry.kind is EntryKind.CLOG:
                self._on(decode_record(entry.payload))
            self.replayed_lsn = entry.lsn + 1
            n += 1
        return n

    def _on(self, rec: ClogRecord) -> None:
        self.max_scn = max(self.max_scn, rec.scn)
        if rec.tag == SINGLE:
            for tablet_id, row in rec.rows:
                self.apply(tablet_id, row)
        elif rec.tag == PREPARE:
            self.pending[rec.txn_id] = rec
        elif rec.tag == COMMIT:
            self.decided[rec.txn_id] = (COMMIT, rec.scn)
            prep = self.pending.pop(rec.txn_id, None)
            if prep is not None:
                for tablet_id, row in prep.rows:
                    self.apply(tablet_id, Row(row.key, row.value, rec.scn, row.tombstone))
        elif rec.tag == ABORT:
            self.decided[rec.txn_id] = (ABORT, 0)
            self.pending.pop(rec.txn_id, None)


def resolve_in_doubt(
    log_service: LogService, replayers: dict[int, ClogReplayer], writer: Callable[[int], int] | None = None
) -> dict[int, str]:
    """Settle every pending Prepare from its coordinator's decision.

    A coordinator Commit means commit everywhere; anything else is an abort.
    The outcome is logged on each participant (and an abort also on the
    coordinator) so the decision becomes durable, then applied.
    """
    outcomes: dict[int, str] = {}
    for ls in sorted(replayers):
        for txn_id, prep in sorted(replayers[ls].pending.items()):
            coord = min(prep.participants)
            rep = replayers.get(coord)
            decision = rep.decided.get(txn_id) if rep is not None else None
            if decision is None and rep is None:
                decision = _scan_decision(log_service, coord, txn_id)
            if decision is not None and decision[0] == COMMIT:
                tag, scn = COMMIT, decision[1]
            else:
                tag, scn = ABORT, 0
                if coord != ls and rep is not None and txn_id not in rep.decided:
                    _log(log_service, coord, ClogRecord(ABORT, txn_id, prep.participants, 0), writer)
                    rep.decided[txn_id] = (ABORT, 0)
            outcomes[txn_id] = "committed" if tag == COMMIT else "aborted"
            rec = ClogRecord(tag, txn_id, prep.participants, scn)
            _log(log_service, ls, rec, writer)
            replayers[ls].poll()
    return outcomes


def _log(log_service: LogService, ls: int, rec: ClogRecord, writer: Callable[[int], int] | None) -> None:
    w = writer(ls) if writer else log_service.owner(ls)
    log_service.append(ls, [encode_record(rec)], EntryKind.CLOG, rec.scn, writer=w)


def _scan_decision(log_service: LogService, ls: int, txn_id: int) -> tuple[int, Scn] | None:
    for entry in log_service.read_iter(ls, 0):
        if entry.kind is EntryKind.CLOG:
            rec = decode_record(entry.payload)
            if rec.txn_id == txn_id and rec.tag in (COMMIT, ABORT):
                return rec.tag, rec.scn
    return None


def recover_streams(
    log_service: LogService, streams: Sequence[int], apply: ApplyFn, from_lsn: dict[int, int] | None = None
) -> tuple[dict[int, ClogReplayer], dict[int, str], Scn]:
    """Replay ``streams`` into fresh state and settle in-doubt 2PC.

    Returns the replayers, the in-doubt outcomes and the highest scn seen.
    """
    reps = {ls: ClogReplayer(log_service, ls, apply, (from_lsn or {}).get(ls, 0)) for ls in streams}
    for r in reps.values():
        r.poll()
    outcomes = resolve_in_doubt(log_service, reps)
    top = max([r.max_scn for r in reps.values()] + [0])
    return reps, outcomes, top
