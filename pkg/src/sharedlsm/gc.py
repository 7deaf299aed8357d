"""Garbage collection coordinated by a per-log-stream lease.

Every node periodically reports its minimum read scn and how far it has
replayed CLog and SSLog.  The coordinator folds the reports into a safe
point and deletes retired objects in two phases: an SSLog intent first, the
deletes after a grace period, and finally one SSLog batch dropping the
garbage records and closing the intent.  Any later coordinator can finish a
half-done intent.
"""

from __future__ import annotations

import logging
from dataclasses import astuple, dataclass, field
from typing import Sequence

from .clock import SECOND, SimClock
from .errors import LeaseExpired, LeaseHeld, PreconditionFailed, StaleReports
from .faults import CrashPoints, points
from .logservice import LogService
from .metadata import MetadataService, SsLogRecord, dumps, loads
from .objstore import ObjectStore

log = logging.getLogger(__name__)

GC_LEASE_MS = 30 * SECOND
GRACE_MS = 5 * SECOND
REPORT_INTERVAL_MS = 2 * SECOND
STALE_INTERVALS = 3
RENEW_BACKOFF_MS = (1 * SECOND, 2 * SECOND, 4 * SECOND)
GC_KIND = "gc"


@dataclass(frozen=True, order=True)
class SafePoint:
    min_read_scn: int
    min_replay_lsn: int
    min_meta_lsn: int = 0

    def merge(self, other: SafePoint) -> SafePoint:
        """Componentwise max, which keeps each component monotone."""
        return SafePoint(
            max(self.min_read_scn, other.min_read_scn),
            max(self.min_replay_lsn, other.min_replay_lsn),
            max(self.min_meta_lsn, other.min_meta_lsn),
        )


@dataclass(frozen=True)
class GcLease:
    log_stream_id: int
    coordinator: int
    expires_at: float


@dataclass
class NodeReport:
    node: int
    min_read_scn: int
    replay_lsn: int
    meta_lsn: int
    at: float

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "min_read_scn": self.min_read_scn,
            "replay_lsn": self.replay_lsn,
            "meta_lsn": self.meta_lsn,
            "at": self.at,
        }


def report_key(log_stream_id: int, node: int) -> str:
    return f"gc/report/{log_stream_id}/{node}"


def member_key(node: int) -> str:
    return f"member/{node}"


def intent_key(log_stream_id: int, intent_id: int) -> str:
    return f"gc/intent/{log_stream_id}/{intent_id:08d}"


def safepoint_key(log_stream_id: int) -> str:
    return f"gc/safepoint/{log_stream_id}"


def report(meta: MetadataService, log_stream_id: int, rep: NodeReport) -> None:
    meta.put_json(report_key(log_stream_id, rep.node), rep.to_dict())


def join(meta: MetadataService, node: int) -> None:
    meta.put_json(member_key(node), {"live": True})


def leave(meta: MetadataService, node: int) -> None:
    """Remove a node from membership; its report stops holding back GC."""
    meta.put_json(member_key(node), None)


def members(meta: MetadataService) -> list[int]:
    return sorted(int(k.decode().split("/")[1]) for k, _ in meta.view.prefix(b"member/"))


def fold_reports(reports: Sequence[NodeReport]) -> SafePoint:
    return SafePoint(
        min(r.min_read_scn for r in reports),
        min(r.replay_lsn for r in reports),
        min(r.meta_lsn for r in reports),
    )


@dataclass
class DeletionIntent:
    intent_id: int
    keys: list[str]
    refs: list[str]
    state: str = "intent"
    created_at: float = 0.0
    holder: int = -1

    def to_dict(self) -> dict:
        return {
            "id": self.intent_id,
            "keys": self.keys,
            "refs": self.refs,
            "state": self.state,
            "created_at": self.created_at,
            "holder": self.holder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DeletionIntent:
        return cls(d["id"], d["keys"], d["refs"], d["state"], d["created_at"], d["holder"])


@dataclass
class GcTraceEvent:
    at: float
    node: int
    action: str
    key: str
    log_stream_id: int = 0


@dataclass
class GcConfig:
    lease_ms: float = GC_LEASE_MS
    grace_ms: float = GRACE_MS
    report_interval_ms: float = REPORT_INTERVAL_MS
    stale_intervals: int = STALE_INTERVALS

    def __post_init__(self):
        if self.lease_ms <= 0 or self.grace_ms < 0 or self.report_interval_ms <= 0:
            raise ValueError("GC timings must be positive")


class GcCoordinator:
    """GC actor on one node for one log stream."""

    def __init__(
        self,
        node_id: int,
        log_stream_id: int,
        meta: MetadataService,
        store: ObjectStore,
        log_service: LogService,
        clock: SimClock,
        config: GcConfig | None = None,
        *,
        crash: CrashPoints | None = None,
        trace: list[GcTraceEvent] | None = None,
    ):
        self.node_id = node_id
        self.log_stream_id = log_stream_id
        self.meta = meta
        self.store = store
        self.logs = log_service
        self.clock = clock
        self.config = config or GcConfig()
        self.crash = points(crash)
        self.trace = [] if trace is None else trace
        self.partitioned = False
        self.stopped = False
        # a blocking coordinator sleeps through grace periods and renewal
        # backoff; an event-driven one picks the work up on a later round
        self.blocking = True

    def _trace(self, action: str, key: str) -> None:
        self.trace.append(GcTraceEvent(self.clock.now(), self.node_id, action, key, self.log_stream_id))

    # -- lease -----------------------------------------------------------------
    def elect(self) -> GcLease:
        if self.partitioned:
            raise LeaseHeld("metadata service unreachable", None)
        lease = self.meta.acquire_sswriter(
            self.log_stream_id, self.node_id, self.config.lease_ms, kind=GC_KIND
        )
        self.stopped = False
        self._trace("lease", str(lease.expires_at))
        return GcLease(self.log_stream_id, self.node_id, lease.expires_at)

    def holds(self) -> bool:
        return not self.stopped and self.meta.verify(self.log_stream_id, self.node_id, kind=GC_KIND)

    def renew(self) -> bool:
        """Renew, backing off 1, 2, 4 s on failure; stops GC when all fail."""
        for wait in (0,) + (RENEW_BACKOFF_MS if self.blocking else ()):
            self.clock.advance(wait)
            if not self.partitioned and self.meta.verify(self.log_stream_id, self.node_id, kind=GC_KIND):
                lease = self.meta.renew_sswriter(
                    self.log_stream_id, self.node_id, self.config.lease_ms, kind=GC_KIND
                )
                self._trace("lease", str(lease.expires_at))
                return True
        if not self.blocking and self.meta.verify(self.log_stream_id, self.node_id, kind=GC_KIND):
            return False
        self.stopped = True
        if not self.partitioned:
            self.release()
        return False

    def release(self) -> None:
        self.meta.release_sswriter(self.log_stream_id, self.node_id, kind=GC_KIND)
        self.stopped = True
        self._trace("release", "")

    def _require_lease(self) -> None:
        if not self.holds():
            raise LeaseExpired(f"node {self.node_id} holds no GC lease on {self.log_stream_id}")

    # -- safe point ------------------------------------------------------------
    def reports(self) -> list[NodeReport]:
        now = self.clock.now()
        bound = self.config.stale_intervals * self.config.report_interval_ms
        out = []
        stale = []
        for node in members(self.meta):
            d = self.meta.view.get_json(report_key(self.log_stream_id, node).encode())
            if d is None or now - d["at"] > bound:
                stale.append(node)
                continue
            out.append(NodeReport(d["node"], d["min_read_scn"], d["replay_lsn"], d["meta_lsn"], d["at"]))
        if stale or not out:
            raise StaleReports(f"missing or stale reports from nodes {stale}", self.current_safe_point())
        return out

    def current_safe_point(self) -> SafePoint:
        d = self.meta.view.get_json(safepoint_key(self.log_stream_id).encode())
        return SafePoint(0, 0, 0) if d is None else SafePoint(*d)

    def compute_safe_point(self) -> SafePoint:
        """Fold live nodes' reports; never lower than the persisted safe point."""
        prev = self.current_safe_point()
        sp = prev.merge(fold_reports(self.reports()))
        if sp != prev:
            self.meta.put_json(safepoint_key(self.log_stream_id), list(astuple(sp)))
        return sp

    # -- deletion --------------------------------------------------------------
    def eligible(self, sp: SafePoint) -> list[tuple[str, dict]]:
        """Garbage records whose data and metadata change every reader has passed."""
        out = []
        claimed = {r for i in self.pending_intents() for r in i.refs}
        for key, raw in self.meta.view.prefix(b"garbage/"):
            if key.decode() in claimed:
                continue
            rec = loads(raw)
            lsn = self.meta.view.key_lsn.get(key, self.meta.view.applied_lsn)
            if rec["scn"] < sp.min_read_scn and lsn < sp.min_meta_lsn:
                out.append((key.decode(), rec))
        return out

    def _next_intent_id(self) -> int:
        ids = [loads(v)["id"] for _, v in self.meta.view.prefix(f"gc/intent/{self.log_stream_id}/".encode())]
        done = self.meta.view.get_json(f"gc/intent-seq/{self.log_stream_id}".encode(), 0)
        return max(ids + [done]) + 1

    def prepare(self, keys: Sequence[str], scn: int, refs: Sequence[str] = (), sp: SafePoint | None = None) -> DeletionIntent:
        """Phase one: check preconditions and record the intent."""
        self._require_lease()
        sp = sp or self.current_safe_point()
        if scn >= sp.min_read_scn:
            raise PreconditionFailed(f"data at scn {scn} is not older than safe point {sp.min_read_scn}")
        intent = DeletionIntent(
            self._next_intent_id(), sorted(set(keys)), sorted(set(refs)), "intent", self.clock.now(), self.node_id
        )
        self.meta.put_json(
            intent_key(self.log_stream_id, intent.intent_id),
            intent.to_dict(),
            node=self.node_id,
            log_stream_id=self.log_stream_id,
            lease_kind=GC_KIND,
        )
        self._trace("intent", str(intent.intent_id))
        self.crash.hit("gc.after_intent")
        return intent

    def execute(self, intent: DeletionIntent) -> None:
        """Phase two: delete data, then drop references and close the intent."""
        if self.clock.now() < intent.created_at + self.config.grace_ms:
            raise PreconditionFailed("grace period has not elapsed")
        for i, key in enumerate(intent.keys):
            self._require_lease()
            self.store.delete(key)
            self._trace("delete", key)
            self.crash.hit(f"gc.after_delete_{i}")
        self._require_lease()
        batch = [SsLogRecord(r.encode(), None) for r in intent.refs]
        batch.append(SsLogRecord(intent_key(self.log_stream_id, intent.intent_id).encode(), None))
        batch.append(SsLogRecord(f"gc/intent-seq/{self.log_stream_id}".encode(), dumps(intent.intent_id)))
        self.meta.sslog_write(batch, node=self.node_id, log_stream_id=self.log_stream_id, lease_kind=GC_KIND)
        self._trace("commit", str(intent.intent_id))
        self.crash.hit("gc.after_commit")

    def two_phase_delete(self, keys: Sequence[str], scn: int, refs: Sequence[str] = ()) -> DeletionIntent:
        intent = self.prepare(keys, scn, refs)
        self.clock.advance_to(intent.created_at + self.config.grace_ms)
        self.execute(intent)
        return intent

    def pending_intents(self) -> list[DeletionIntent]:
        return [
            DeletionIntent.from_dict(loads(v))
            for _, v in self.meta.view.prefix(f"gc/intent/{self.log_stream_id}/".encode())
        ]

    def recover(self) -> list[DeletionIntent]:
        """Finish every open intent (deletes are idempotent)."""
        done = []
        for intent in self.pending_intents():
            ready = intent.created_at + self.config.grace_ms
            if not self.blocking and self.clock.now() < ready:
                continue
            self.clock.advance_to(max(ready, self.clock.now()))
            self.execute(intent)
            done.append(intent)
        return done

    def run_round(self) -> int:
        """One coordination round: safe point, recovery, then new deletions."""
        self._require_lease()
        sp = self.compute_safe_point()
        deleted = sum(len(i.keys) for i in self.recover())
        for gkey, rec in self.eligible(sp):
            if not rec["keys"]:
                self.execute_refs_only(gkey)
                continue
            if self.blocking:
                self.two_phase_delete(rec["keys"], rec["scn"], [gkey])
                deleted += len(rec["keys"])
            else:
                self.prepare(rec["keys"], rec["scn"], [gkey], sp)
        return deleted

    def execute_refs_only(self, gkey: str) -> None:
        self._require_lease()
        self.meta.sslog_write(
            [SsLogRecord(gkey.encode(), None)], node=self.node_id, log_stream_id=self.log_stream_id, lease_kind=GC_KIND
        )

    # -- log reclamation -------------------------------------------------------
    def reclaim_clog(self, sp: SafePoint | None = None) -> int:
        self._require_lease()
        sp = sp or self.current_safe_point()
        bound = self.logs.reclaim(self.log_stream_id, sp.min_replay_lsn, self.logs.relocated_end(self.log_stream_id))
        self._trace("reclaim", str(bound))
        return bound


@dataclass
class Referee:
    """Test-side observer that checks GC safety over a whole run."""

    store: ObjectStore
    violations: list[str] = field(default_factory=list)

    def on_block_access(self, key: str, read_scn: int, sp: SafePoint) -> None:
        if key in self.store.deleted and not self.store.exists(key) and read_scn >= sp.min_read_scn:
            self.violations.append(f"read at {read_scn} touched deleted {key}")

    def check_lease_trace(self, trace: Sequence[GcTraceEvent]) -> None:
        """Leases of different nodes never overlap, and every GC mutation
        happens inside a lease of the node that made it."""
        by_stream: dict[int, list[GcTraceEvent]] = {}
        for ev in trace:
            by_stream.setdefault(ev.log_stream_id, []).append(ev)
        for events in by_stream.values():
            self._check_stream(events)

    def _check_stream(self, trace: Sequence[GcTraceEvent]) -> None:
        spans: list[tuple[float, float, int]] = []
        for ev in trace:
            if ev.action == "lease":
                # a renewal supersedes the same holder's previous span
                if spans and spans[-1][2] == ev.node and spans[-1][1] > ev.at:
                    spans[-1] = (spans[-1][0], float(ev.key), ev.node)
                else:
                    spans.append((ev.at, float(ev.key), ev.node))
            elif ev.action == "release" and spans and spans[-1][2] == ev.node:
                spans[-1] = (spans[-1][0], min(spans[-1][1], ev.at), ev.node)
        for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
            if n1 != n2 and s2 < e1:
                self.violations.append(f"leases of {n1} and {n2} overlap at {s2}")
        for ev in trace:
            if ev.action in ("intent", "delete", "commit"):
                if not any(n == ev.node and s <= ev.at < e for s, e, n in spans):
                    self.violations.append(f"{ev.action} {ev.key} at {ev.at} outside a lease of {ev.node}")
