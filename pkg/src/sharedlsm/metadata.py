"""SSLog and the hierarchical metadata service.

SSLog is a key/value mutation log carried by a dedicated log stream.  Every
metadata change, SSWriter lease grant, GC lease, deletion intent and cache
version bump is an SSLog record, so all of them share one total order.
Nodes keep a :class:`MetaView` and converge by polling.

Node, tenant and log-stream level files are written through to the object
store before an update is acknowledged.  Tablet level files are written back:
the SSLog record is the commit and the file follows asynchronously.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .clock import SECOND, SimClock
from .core import Row
from .errors import BlockedByActiveTxn, LeaseExpired, LeaseHeld, Truncated
from .faults import CrashPoints, points
from .logservice import EntryKind, LogService
from .objstore import ObjectStore

log = logging.getLogger(__name__)

SSLOG_STREAM = 0
META_ACTOR = -1

SSWRITER_LEASE_MS = 10 * SECOND
PERSIST_EVERY = 16
PERSIST_INTERVAL_MS = 5 * SECOND


class MetaLevel(str, enum.Enum):
    NODE = "node"
    TENANT = "tenant"
    LOG_STREAM = "logstream"
    TABLET = "tablet"

    @property
    def write_through(self) -> bool:
        return self is not MetaLevel.TABLET


@dataclass(frozen=True)
class SsLogRecord:
    key: bytes
    value: bytes | None
    scn: int = 0

    @property
    def tombstone(self) -> bool:
        return self.value is None


def dumps(obj) -> bytes:
    """Canonical JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def loads(data: bytes):
    return json.loads(data)


def encode_records(records: Sequence[SsLogRecord]) -> bytes:
    rows = [Row(r.key, r.value or b"", r.scn, r.value is None) for r in records]
    return struct.pack(">I", len(rows)) + b"".join(row.serialize() for row in rows)


def decode_records(buf: bytes) -> list[SsLogRecord]:
    (n,) = struct.unpack_from(">I", buf, 0)
    pos, out = 4, []
    for _ in range(n):
        row, pos = Row.deserialize_from(buf, pos)
        out.append(SsLogRecord(row.key, None if row.tombstone else row.value, row.commit_scn))
    return out


def meta_key(level: MetaLevel, obj_id) -> bytes:
    return f"meta/{MetaLevel(level).value}/{obj_id}".encode()


def meta_object_key(level: MetaLevel, obj_id, version: int) -> str:
    return f"meta/{MetaLevel(level).value}/{obj_id}/{version}"


def snapshot_key(lsn: int) -> str:
    return f"meta/snapshot/{lsn:012d}"


class MetaView:
    """A node's replayed copy of the SSLog key/value table."""

    def __init__(self):
        self.kv: dict[bytes, tuple[bytes, int]] = {}
        self.key_lsn: dict[bytes, int] = {}  # SSLog lsn of each key's current value
        self.applied_lsn = 0

    def apply(self, records: Iterable[SsLogRecord], lsn: int = 0) -> None:
        for r in records:
            cur = self.kv.get(r.key)
            if cur is not None and cur[1] > r.scn:
                continue
            if r.value is None:
                self.kv.pop(r.key, None)
                self.key_lsn.pop(r.key, None)
            else:
                self.kv[r.key] = (r.value, r.scn)
                self.key_lsn[r.key] = lsn

    def get(self, key: bytes) -> bytes | None:
        hit = self.kv.get(key)
        return hit[0] if hit else None

    def get_json(self, key: bytes, default=None):
        raw = self.get(key)
        return default if raw is None else loads(raw)

    def prefix(self, prefix: bytes) -> list[tuple[bytes, bytes]]:
        return sorted((k, v) for k, (v, _) in self.kv.items() if k.startswith(prefix))

    def meta(self, level: MetaLevel, obj_id) -> dict | None:
        return self.get_json(meta_key(level, obj_id))

    def lease(self, log_stream_id: int, kind: str = "sswriter") -> dict | None:
        return self.get_json(f"{kind}/lease/{log_stream_id}".encode())

    def state(self) -> dict[bytes, bytes]:
        return {k: v for k, (v, _) in self.kv.items()}

    def encode(self) -> bytes:
        records = [SsLogRecord(k, v, s) for k, (v, s) in sorted(self.kv.items())]
        return struct.pack(">Q", self.applied_lsn) + encode_records(records)

    @classmethod
    def decode(cls, buf: bytes) -> MetaView:
        view = cls()
        (view.applied_lsn,) = struct.unpack_from(">Q", buf, 0)
        view.apply(decode_records(buf[8:]), view.applied_lsn)
        return view

    def __eq__(self, other):
        return isinstance(other, MetaView) and self.state() == other.state()


@dataclass(frozen=True)
class SsWriterLease:
    log_stream_id: int
    holder: int
    expires_at: float

    def valid(self, now: float) -> bool:
        return now < self.expires_at


def lease_valid(rec: dict | None, node: int, now: float) -> bool:
    return rec is not None and rec["holder"] == node and now < rec["expires_at"]


class MetadataService:
    """Single logical metadata actor; writes SSLog and owns write-through files."""

    def __init__(
        self,
        log_service: LogService,
        store: ObjectStore,
        clock: SimClock | None = None,
        *,
        lease_ms: float = SSWRITER_LEASE_MS,
        persist_every: int = PERSIST_EVERY,
        persist_interval_ms: float = PERSIST_INTERVAL_MS,
        crash: CrashPoints | None = None,
    ):
        self.log = log_service
        self.store = store
        self.clock = clock or SimClock()
        self.lease_ms = lease_ms
        self.persist_every = persist_every
        self.persist_interval_ms = persist_interval_ms
        self.crash = points(crash)
        self.view = MetaView()
        self.pending_persist: dict[tuple[MetaLevel, str], int] = {}
        self._commits_since_persist = 0
        self._last_persist = self.clock.now()
        self._scn = 0
        self.deferred_drops: set[int] = set()
        if SSLOG_STREAM not in self.log.streams:
            self.log.create_stream(SSLOG_STREAM, META_ACTOR)

    # -- SSLog -----------------------------------------------------------
    def sslog_write(
        self,
        mutations: Sequence[SsLogRecord],
        *,
        node: int | None = None,
        log_stream_id: int | None = None,
        lease_kind: str = "sswriter",
    ) -> int:
        """Commit ``mutations`` as one SSLog append and return its lsn.

        With ``log_stream_id`` the write is fenced by that stream's lease: the
        caller ``node`` must hold it, unexpired, at the current clock.
        """
        if log_stream_id is not None and not self.verify(log_stream_id, node, kind=lease_kind):
            raise LeaseExpired(f"node {node} holds no valid {lease_kind} lease on {log_stream_id}")
        self._scn = max(self._scn + 1, self.log.last_scn(SSLOG_STREAM) + 1)
        stamped = [SsLogRecord(m.key, m.value, self._scn) for m in mutations]
        lsns = self.log.append(
            SSLOG_STREAM, [encode_records(stamped)], EntryKind.SSLOG, self._scn, writer=META_ACTOR
        )
        self.view.apply(stamped, lsns.start)
        self.view.applied_lsn = lsns.stop
        return lsns.start

    def sslog_poll(self, from_lsn: int) -> tuple[list[tuple[int, list[SsLogRecord]]], int]:
        """(lsn, records) batches from ``from_lsn`` and the next lsn to poll."""
        batches = []
        lsn = from_lsn
        for entry in self.log.read_iter(SSLOG_STREAM, from_lsn):
            batches.append((entry.lsn, decode_records(entry.payload)))
            lsn = entry.lsn + 1
        return batches, lsn

    def put(self, key: bytes, value: bytes | None, **fence) -> int:
        return self.sslog_write([SsLogRecord(key, value)], **fence)

    def put_json(self, key: str, obj, **fence) -> int:
        return self.put(key.encode(), None if obj is None else dumps(obj), **fence)

    # -- leases ----------------------------------------------------------
    def acquire_sswriter(
        self, log_stream_id: int, node: int, duration: float | None = None, *, kind: str = "sswriter"
    ) -> SsWriterLease:
        now = self.clock.now()
        cur = self.view.lease(log_stream_id, kind)
        if cur is not None and cur["holder"] != node and now < cur["expires_at"]:
            raise LeaseHeld(f"{kind} lease on {log_stream_id} held by {cur['holder']}", cur["holder"])
        expires = now + (self.lease_ms if duration is None else duration)
        self.put_json(f"{kind}/lease/{log_stream_id}", {"holder": node, "expires_at": expires, "granted_at": now})
        return SsWriterLease(log_stream_id, node, expires)

    def renew_sswriter(self, log_stream_id: int, node: int, duration: float | None = None, *, kind: str = "sswriter") -> SsWriterLease:
        if not self.verify(log_stream_id, node, kind=kind):
            raise LeaseExpired(f"node {node} cannot renew an expired {kind} lease on {log_stream_id}")
        return self.acquire_sswriter(log_stream_id, node, duration, kind=kind)

    def release_sswriter(self, log_stream_id: int, node: int, *, kind: str = "sswriter") -> None:
        if self.verify(log_stream_id, node, kind=kind):
            self.put_json(f"{kind}/lease/{log_stream_id}", None)

    def verify(self, log_stream_id: int, node: int | None, now: float | None = None, *, kind: str = "sswriter") -> bool:
        now = self.clock.now() if now is None else now
        return lease_valid(self.view.lease(log_stream_id, kind), node, now)

    def lease_holder(self, log_stream_id: int, now: float | None = None, *, kind: str = "sswriter") -> int | None:
        now = self.clock.now() if now is None else now
        rec = self.view.lease(log_stream_id, kind)
        if rec is not None and now < rec["expires_at"]:
            return rec["holder"]
        return None

    # -- hierarchical metadata ------------------------------------------
    def read_meta(self, level: MetaLevel, obj_id) -> dict | None:
        rec = self.view.meta(level, obj_id)
        return None if rec is None else rec["payload"]

    def meta_version(self, level: MetaLevel, obj_id) -> int:
        rec = self.view.meta(level, obj_id)
        return 0 if rec is None else rec["version"]

    def meta_update(
        self, level: MetaLevel, obj_id, payload: dict, extra: Sequence[SsLogRecord] = (), **fence
    ) -> int:
        """Install a new version; ``extra`` records commit in the same SSLog batch."""
        level = MetaLevel(level)
        version = self.meta_version(level, obj_id) + 1
        rec = {"version": version, "payload": payload}
        batch = [SsLogRecord(meta_key(level, obj_id), dumps(rec)), *extra]
        if level.write_through:
            self.store.put(meta_object_key(level, obj_id, version), dumps(rec))
            self.sslog_write(batch, **fence)
        else:
            self.sslog_write(batch, **fence)
            self.pending_persist[(level, str(obj_id))] = version
            self._commits_since_persist += 1
            self.maybe_persist()
        return version

    def maybe_persist(self) -> list[str]:
        due = (
            self._commits_since_persist >= self.persist_every
            or self.clock.now() - self._last_persist >= self.persist_interval_ms
        )
        return self.persist_pending() if due and self.pending_persist else []

    def persist_pending(self) -> list[str]:
        """Write back tablet-level files whose latest version is only in SSLog."""
        written = []
        for (level, obj_id), version in sorted(self.pending_persist.items()):
            rec = self.view.meta(level, obj_id)
            if rec is None or rec["version"] != version:
                continue
            key = meta_object_key(level, obj_id, version)
            self.store.put(key, dumps(rec))
            written.append(key)
        self.pending_persist.clear()
        self._commits_since_persist = 0
        self._last_persist = self.clock.now()
        return written

    # -- metadata two-phase commit --------------------------------------
    def meta_2pc(
        self,
        txid: str,
        children: Sequence[tuple[MetaLevel, object, dict]],
        parent: tuple[MetaLevel, object, dict],
    ) -> str:
        """Publish child files, then flip the parent to reference them.

        Prepare records the intent in SSLog and writes child files under new
        versions no view references yet; commit is one SSLog batch that
        installs the children and the parent together.
        """
        ikey = f"2pc/{txid}".encode()
        state = self.view.get_json(ikey)
        if state is not None and state["state"] in ("committed", "aborted"):
            return state["state"]
        refs = []
        for level, obj_id, _ in children:
            level = MetaLevel(level)
            refs.append([level.value, str(obj_id), self.meta_version(level, obj_id) + 1])
        plevel, pid, ppayload = parent
        plevel = MetaLevel(plevel)
        pversion = self.meta_version(plevel, pid) + 1
        self.put(ikey, dumps({"state": "prepared", "children": refs, "parent": [plevel.value, str(pid), pversion]}))
        self.crash.hit("meta2pc.after_intent")
        child_recs = []
        for i, ((_, _, payload), (lv, oid, ver)) in enumerate(zip(children, refs)):
            rec = {"version": ver, "payload": payload}
            self.store.put(meta_object_key(MetaLevel(lv), oid, ver), dumps(rec))
            child_recs.append(SsLogRecord(meta_key(MetaLevel(lv), oid), dumps(rec)))
            self.crash.hit(f"meta2pc.after_child_{i}")
        prec = {"version": pversion, "payload": dict(ppayload, children=refs)}
        if plevel.write_through:
            self.store.put(meta_object_key(plevel, pid, pversion), dumps(prec))
            self.crash.hit("meta2pc.after_parent_file")
        self.sslog_write(
            child_recs
            + [SsLogRecord(meta_key(plevel, pid), dumps(prec)), SsLogRecord(ikey, dumps({"state": "committed"}))]
        )
        self.crash.hit("meta2pc.after_commit")
        return "committed"

    def recover_2pc(self) -> list[str]:
        """Abort every prepared-but-uncommitted metadata 2PC; return orphaned file keys."""
        orphans = []
        for key, raw in self.view.prefix(b"2pc/"):
            state = loads(raw)
            if state["state"] != "prepared":
                continue
            for lv, oid, ver in state["children"]:
                orphans.append(meta_object_key(MetaLevel(lv), oid, ver))
            lv, oid, ver = state["parent"]
            if MetaLevel(lv).write_through:
                orphans.append(meta_object_key(MetaLevel(lv), oid, ver))
            self.put(key, dumps({"state": "aborted", "orphans": orphans}))
        return orphans

    def reachable_meta_files(self) -> set[str]:
        """Object keys of metadata files referenced by the current view."""
        out = set()
        for key, raw in self.view.prefix(b"meta/"):
            parts = key.decode().split("/")
            if len(parts) != 3:
                continue
            rec = loads(raw)
            out.add(meta_object_key(MetaLevel(parts[1]), parts[2], rec["version"]))
            for lv, oid, ver in rec["payload"].get("children", []) if isinstance(rec["payload"], dict) else []:
                out.add(meta_object_key(MetaLevel(lv), oid, ver))
        return out

    # -- table-level changes ---------------------------------------------
    def create_table(self, table_id: int, partitions: int = 1) -> None:
        self.put_json(f"table/{table_id}", {"schema_version": 1, "partitions": partitions})

    def table(self, table_id: int) -> dict | None:
        return self.view.get_json(f"table/{table_id}".encode())

    def table_change(
        self, op: str, table_id: int, active_refs: Callable[[int], int] | None = None
    ) -> None:
        cur = self.table(table_id)
        if cur is None:
            raise KeyError(f"no table {table_id}")
        if op == "drop" and active_refs is not None and active_refs(table_id) > 0:
            self.deferred_drops.add(table_id)
            raise BlockedByActiveTxn(f"table {table_id} referenced by active transactions")
        if op == "schema_change":
            new = dict(cur, schema_version=cur["schema_version"] + 1)
        elif op == "partition_split":
            new = dict(cur, partitions=cur["partitions"] * 2)
        elif op == "drop":
            new = None
        else:
            raise ValueError(f"unknown table op {op!r}")
        ikey = f"table/intent/{table_id}"
        self.put_json(ikey, {"op": op})
        self.crash.hit("table.after_intent")
        self.sslog_write(
            [
                SsLogRecord(f"table/{table_id}".encode(), None if new is None else dumps(new)),
                SsLogRecord(ikey.encode(), None),
            ]
        )
        self.deferred_drops.discard(table_id)
        self.crash.hit("table.after_commit")

    def resume_deferred(self, active_refs: Callable[[int], int]) -> list[int]:
        done = []
        for table_id in sorted(self.deferred_drops):
            if active_refs(table_id) == 0:
                self.table_change("drop", table_id, active_refs)
                done.append(table_id)
        return done

    def recover_table_changes(self) -> list[int]:
        """Roll back table operations whose intent never reached commit."""
        rolled = []
        for key, _ in self.view.prefix(b"table/intent/"):
            self.put(key, None)
            rolled.append(int(key.decode().rsplit("/", 1)[1]))
        return rolled

    # -- snapshots and recovery -------------------------------------------
    def snapshot(self) -> str:
        key = snapshot_key(self.view.applied_lsn)
        self.store.put(key, self.view.encode())
        return key

    @classmethod
    def recover(cls, log_service: LogService, store: ObjectStore, clock: SimClock | None = None, **kw) -> MetadataService:
        """Rebuild the metadata actor after a crash from snapshot + SSLog replay."""
        svc = cls(log_service, store, clock, **kw)
        svc.view = bootstrap_view(svc)
        svc._scn = log_service.last_scn(SSLOG_STREAM)
        for key, raw in svc.view.prefix(b"meta/tablet/"):
            rec = loads(raw)
            obj_id = key.decode().split("/")[2]
            if not store.exists(meta_object_key(MetaLevel.TABLET, obj_id, rec["version"])):
                svc.pending_persist[(MetaLevel.TABLET, obj_id)] = rec["version"]
        return svc


def bootstrap_view(svc: MetadataService) -> MetaView:
    """Latest usable snapshot plus the SSLog suffix after it."""
    view = MetaView()
    try:
        batches, nxt = svc.sslog_poll(0)
    except Truncated:
        keys = svc.store.list("meta/snapshot/")
        if not keys:
            raise
        view = MetaView.decode(svc.store.get(keys[-1]))
        batches, nxt = svc.sslog_poll(view.applied_lsn)
    for lsn, b in batches:
        view.apply(b, lsn)
    view.applied_lsn = nxt
    return view


class MetaReplica:
    """A node's polled copy of metadata (RO nodes, GC, caches)."""

    def __init__(self, service: MetadataService):
        self.service = service
        self.view = MetaView()

    def poll(self) -> int:
        """Apply new SSLog batches; returns how many were applied."""
        try:
            batches, nxt = self.service.sslog_poll(self.view.applied_lsn)
        except Truncated:
            self.view = bootstrap_view(self.service)
            return 1
        for lsn, b in batches:
            self.view.apply(b, lsn)
        self.view.applied_lsn = nxt
        return len(batches)

    def reset(self) -> None:
        self.view = MetaView()


def read_meta_file(store: ObjectStore, level: MetaLevel, obj_id, version: int) -> dict:
    return loads(store.get(meta_object_key(level, obj_id, version)))
