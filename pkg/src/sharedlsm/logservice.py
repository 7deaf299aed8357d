"""A three-replica, majority-quorum shared log with batching and pipelining.

Each log stream has a fixed trio of replicas and one leader replica; writes
are accepted only from the stream's registered owner (the compute node that
leads the stream).  An entry is committed once two of three replicas persist
it.  Committed entries are read through iterators that fall back from local
replica files to segments relocated into the object store.
"""

from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .core import crc32
from .errors import CorruptBlock, NotFound, NotLeader, QuorumUnavailable, Truncated
from .objstore import ObjectStore

BATCH_CAP = 64
PIPELINE_DEPTH = 4
SEGMENT_ENTRIES = 128
MULTIUPLOAD_PART = 64 * 1024


class EntryKind(enum.IntEnum):
    CLOG = 0
    JOURNAL = 1
    SSLOG = 2


@dataclass(frozen=True)
class LogEntry:
    log_stream_id: int
    lsn: int
    scn: int
    kind: EntryKind
    payload: bytes
    term: int = 0


def encode_segment(entries: Sequence[LogEntry]) -> bytes:
    parts = [struct.pack(">I", len(entries))]
    for e in entries:
        parts.append(struct.pack(">QQBI", e.lsn, e.scn, int(e.kind), len(e.payload)))
        parts.append(e.payload)
    body = b"".join(parts)
    return body + struct.pack(">I", crc32(body))


def decode_segment(buf: bytes, log_stream_id: int, pos: int = 0) -> tuple[list[LogEntry], int]:
    """Decode one segment starting at ``pos``; returns entries and the end offset."""
    start = pos
    (count,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        lsn, scn, kind, ln = struct.unpack_from(">QQBI", buf, pos)
        pos += 21
        entries.append(LogEntry(log_stream_id, lsn, scn, EntryKind(kind), bytes(buf[pos : pos + ln])))
        pos += ln
    (stored,) = struct.unpack_from(">I", buf, pos)
    if crc32(buf[start:pos]) != stored:
        raise CorruptBlock("log segment crc mismatch")
    return entries, pos + 4


def segment_key(log_stream_id: int, first: int, last: int) -> str:
    return f"clog/{log_stream_id}/{first}-{last}"


def archive_key(log_stream_id: int) -> str:
    return f"archive/{log_stream_id}/log"


class Role(enum.Enum):
    LEADER = "leader"
    FOLLOWER = "follower"


@dataclass
class Replica:
    id: int
    entries: list[LogEntry] = field(default_factory=list)
    base: int = 0  # first lsn still held in local files
    alive: bool = True
    reachable: bool = True
    role: Role = Role.FOLLOWER

    @property
    def persisted_lsn(self) -> int:
        """Exclusive end of the locally persisted log."""
        return self.base + len(self.entries)

    def get(self, lsn: int) -> LogEntry | None:
        i = lsn - self.base
        if 0 <= i < len(self.entries):
            return self.entries[i]
        return None

    def truncate_from(self, lsn: int) -> None:
        del self.entries[max(lsn - self.base, 0) :]

    def trim_below(self, lsn: int) -> None:
        if lsn > self.base:
            del self.entries[: lsn - self.base]
            self.base = lsn


@dataclass
class StreamStats:
    appends: int = 0
    rounds: int = 0
    entries: int = 0


@dataclass
class LogStream:
    id: int
    replicas: list[Replica]
    owner: int
    leader: int = 0
    term: int = 1
    committed_end: int = 0
    last_scn: int = 0
    relocated_end: int = 0
    reclaimed_end: int = 0
    segments: list[tuple[int, int, str]] = field(default_factory=list)
    stats: StreamStats = field(default_factory=StreamStats)
    crash_leader_after_persist: bool = False

    def replica(self, rid: int) -> Replica:
        for r in self.replicas:
            if r.id == rid:
                return r
        raise KeyError(rid)

    @property
    def leader_replica(self) -> Replica:
        return self.replica(self.leader)

    def quorum(self) -> int:
        return len(self.replicas) // 2 + 1


class LogService:
    def __init__(
        self,
        store: ObjectStore,
        *,
        batch_cap: int = BATCH_CAP,
        pipeline_depth: int = PIPELINE_DEPTH,
        segment_entries: int = SEGMENT_ENTRIES,
        seed: int = 0,
    ):
        self.store = store
        self.batch_cap = batch_cap
        self.pipeline_depth = pipeline_depth
        self.segment_entries = segment_entries
        self.rng = random.Random(seed)
        self.streams: dict[int, LogStream] = {}
        self._archive_wm: dict[int, int | None] = {}
        self._segment_cache: dict[str, list[LogEntry]] = {}

    # -- membership ------------------------------------------------------
    def create_stream(self, log_stream_id: int, owner: int, replica_ids: Sequence[int] = (0, 1, 2)) -> LogStream:
        if log_stream_id in self.streams:
            raise ValueError(f"log stream {log_stream_id} exists")
        replicas = [Replica(rid) for rid in replica_ids]
        replicas[0].role = Role.LEADER
        stream = LogStream(log_stream_id, replicas, owner, leader=replicas[0].id)
        self.streams[log_stream_id] = stream
        self._archive_wm[log_stream_id] = 0
        return stream

    def stream(self, log_stream_id: int) -> LogStream:
        return self.streams[log_stream_id]

    def set_owner(self, log_stream_id: int, node_id: int) -> None:
        self.streams[log_stream_id].owner = node_id

    def owner(self, log_stream_id: int) -> int:
        return self.streams[log_stream_id].owner

    def committed_end(self, log_stream_id: int) -> int:
        return self.streams[log_stream_id].committed_end

    def last_scn(self, log_stream_id: int) -> int:
        return self.streams[log_stream_id].last_scn

    def crash_replica(self, log_stream_id: int, rid: int) -> None:
        self.streams[log_stream_id].replica(rid).alive = False

    def partition_replica(self, log_stream_id: int, rid: int, reachable: bool = False) -> None:
        self.streams[log_stream_id].replica(rid).reachable = reachable

    def revive_replica(self, log_stream_id: int, rid: int) -> None:
        """Restart a replica; it keeps its local files and catches up from the leader."""
        s = self.streams[log_stream_id]
        r = s.replica(rid)
        r.alive = True
        r.reachable = True
        if rid != s.leader:
            r.role = Role.FOLLOWER
            if s.leader_replica.alive:
                self._catch_up(s, r)

    # -- write path ------------------------------------------------------
    def append(
        self,
        log_stream_id: int,
        payloads: Sequence[bytes],
        kind: EntryKind = EntryKind.CLOG,
        scn_hint: int = 0,
        *,
        writer: int,
        pipelined: bool = True,
    ) -> range:
        """Replicate ``payloads`` and return their committed lsn range.

        Returns only after a majority of replicas persisted every entry.
        """
        s = self.streams[log_stream_id]
        if writer != s.owner:
            raise NotLeader(log_stream_id, s.owner)
        leader = s.leader_replica
        if not leader.alive:
            raise QuorumUnavailable(f"log stream {log_stream_id}: leader replica down")
        followers = [r for r in s.replicas if r.id != s.leader and r.alive and r.reachable]
        if 1 + len(followers) < s.quorum():
            raise QuorumUnavailable(f"log stream {log_stream_id}: {1 + len(followers)} replicas reachable")
        s.stats.appends += 1
        if not payloads:
            return range(s.committed_end, s.committed_end)
        scn = max(scn_hint, s.last_scn)
        start = leader.persisted_lsn
        entries = [
            LogEntry(log_stream_id, start + i, scn, EntryKind(kind), bytes(p), s.term)
            for i, p in enumerate(payloads)
        ]
        batches = [entries[i : i + self.batch_cap] for i in range(0, len(entries), self.batch_cap)]
        depth = self.pipeline_depth if pipelined else 1
        for w in range(0, len(batches), depth):
            self._round(s, leader, followers, batches[w : w + depth])
        s.last_scn = scn
        s.stats.entries += len(entries)
        return range(start, start + len(entries))

    def _round(self, s: LogStream, leader: Replica, followers: list[Replica], window: list[list[LogEntry]]) -> None:
        """Overlap up to ``pipeline_depth`` consensus rounds.

        Followers may receive the in-flight batches in any order; each buffers
        out-of-order batches and persists only contiguously, so the commit
        point only ever moves along the lsn order.
        """
        for batch in window:
            leader.entries.extend(batch)
            s.stats.rounds += 1
        if s.crash_leader_after_persist:
            s.crash_leader_after_persist = False
            leader.alive = False
            raise QuorumUnavailable(f"log stream {s.id}: leader crashed before replication")
        for f in followers:
            order = list(range(len(window)))
            if len(window) > 1:
                self.rng.shuffle(order)
            pending = {}
            for i in order:
                pending[window[i][0].lsn] = window[i]
                while f.persisted_lsn in pending:
                    f.entries.extend(pending.pop(f.persisted_lsn))
        end = window[-1][-1].lsn + 1
        acks = 1 + sum(1 for f in followers if f.persisted_lsn >= end)
        if acks < s.quorum():
            leader.truncate_from(s.committed_end)
            raise QuorumUnavailable(f"log stream {s.id}: only {acks} acks")
        s.committed_end = end

    def _catch_up(self, s: LogStream, r: Replica) -> None:
        """Leader retransmits: drop divergent suffix, then fill the gap."""
        leader = s.leader_replica
        n = r.persisted_lsn
        lsn = max(r.base, leader.base)
        while lsn < n:
            mine, theirs = r.get(lsn), leader.get(lsn)
            if theirs is None or mine is None or mine.term != theirs.term:
                r.truncate_from(lsn)
                break
            lsn += 1
        if r.persisted_lsn < leader.base:
            r.entries.clear()
            r.base = leader.base
        for lsn in range(r.persisted_lsn, leader.persisted_lsn):
            r.entries.append(leader.get(lsn))

    def leader_failover(self, log_stream_id: int) -> int:
        """Elect the alive replica with the longest persisted log."""
        s = self.streams[log_stream_id]
        alive = [r for r in s.replicas if r.alive and r.reachable]
        if len(alive) < s.quorum():
            raise QuorumUnavailable(f"log stream {log_stream_id}: cannot elect with {len(alive)} replicas")
        new = max(alive, key=lambda r: (r.persisted_lsn, -r.id))
        for r in s.replicas:
            r.role = Role.FOLLOWER
        new.role = Role.LEADER
        s.leader = new.id
        s.term += 1
        for r in alive:
            if r is not new:
                self._catch_up(s, r)
        s.committed_end = max(s.committed_end, new.persisted_lsn)
        if new.entries:
            s.last_scn = max(s.last_scn, new.entries[-1].scn)
        return new.id

    # -- read path -------------------------------------------------------
    def read_iter(self, log_stream_id: int, from_lsn: int = 0, replica: int | None = None) -> Iterator[LogEntry]:
        """Committed entries from ``from_lsn`` on, local files first, relocated segments second."""
        s = self.streams[log_stream_id]
        if from_lsn > s.committed_end:
            raise ValueError(f"from_lsn {from_lsn} beyond committed end {s.committed_end}")
        self._entry(s, from_lsn, replica, probe=True)
        return self._iter(s, from_lsn, replica)

    def _iter(self, s: LogStream, lsn: int, replica: int | None) -> Iterator[LogEntry]:
        while lsn < s.committed_end:
            yield self._entry(s, lsn, replica)
            lsn += 1

    def _local(self, s: LogStream, replica: int | None) -> Replica | None:
        if replica is not None:
            r = s.replica(replica)
            return r if r.alive else None
        if s.leader_replica.alive:
            return s.leader_replica
        return next((r for r in s.replicas if r.alive), None)

    def _entry(self, s: LogStream, lsn: int, replica: int | None, probe: bool = False) -> LogEntry | None:
        if probe and lsn >= s.committed_end:
            return None
        local = self._local(s, replica)
        if local is not None:
            e = local.get(lsn)
            if e is not None:
                return e
        for first, last, key in s.segments:
            if first <= lsn <= last:
                try:
                    entries = self._load_segment(s.id, key)
                except NotFound:
                    break
                return entries[lsn - first]
        raise Truncated(f"log stream {s.id}: lsn {lsn} reclaimed and not relocated")

    def _load_segment(self, log_stream_id: int, key: str) -> list[LogEntry]:
        if key not in self._segment_cache:
            entries, _ = decode_segment(self.store.get(key), log_stream_id)
            self._segment_cache[key] = entries
        return self._segment_cache[key]

    # -- relocation, reclamation, archiving ------------------------------
    def relocate(self, log_stream_id: int, up_to_lsn: int) -> list[str]:
        """Move committed entries up to ``up_to_lsn`` (inclusive) into the object store."""
        s = self.streams[log_stream_id]
        if up_to_lsn >= s.committed_end:
            raise ValueError(f"up_to_lsn {up_to_lsn} not committed (end {s.committed_end})")
        written = []
        while s.relocated_end <= up_to_lsn:
            first = s.relocated_end
            last = min(first + self.segment_entries - 1, up_to_lsn)
            entries = [self._entry(s, lsn, None) for lsn in range(first, last + 1)]
            data = encode_segment(entries)
            key = segment_key(log_stream_id, first, last)
            parts = [data[i : i + MULTIUPLOAD_PART] for i in range(0, len(data), MULTIUPLOAD_PART)]
            self.store.multiupload(key, parts)
            s.segments.append((first, last, key))
            s.relocated_end = last + 1
            written.append(key)
        return written

    def relocated_end(self, log_stream_id: int) -> int:
        return self.streams[log_stream_id].relocated_end

    def reclaim(self, log_stream_id: int, min_replay_lsn: int, relocation_lsn: int) -> int:
        """Delete local files below min(min_replay_lsn, relocation_lsn)."""
        s = self.streams[log_stream_id]
        bound = min(min_replay_lsn, relocation_lsn, s.committed_end)
        if bound > s.reclaimed_end:
            for r in s.replicas:
                r.trim_below(bound)
            s.reclaimed_end = bound
        return bound

    def drop_segments_below(self, log_stream_id: int, lsn: int) -> list[str]:
        """Delete relocated segments that end below ``lsn``."""
        s = self.streams[log_stream_id]
        gone = [seg for seg in s.segments if seg[1] < lsn]
        for _, _, key in gone:
            self.store.delete(key)
            self._segment_cache.pop(key, None)
        s.segments = [seg for seg in s.segments if seg[1] >= lsn]
        return [k for _, _, k in gone]

    def archive(self, log_stream_id: int) -> int:
        """Append newly committed entries to the archive object; returns the watermark."""
        s = self.streams[log_stream_id]
        wm = self._archive_wm.get(log_stream_id)
        if wm is None:
            wm = self._recover_archive_watermark(log_stream_id)
        if wm < s.committed_end:
            entries = list(self.read_iter(log_stream_id, wm))
            self.store.append(archive_key(log_stream_id), encode_segment(entries))
            wm = entries[-1].lsn + 1
        self._archive_wm[log_stream_id] = wm
        return wm

    def _recover_archive_watermark(self, log_stream_id: int) -> int:
        try:
            data = self.store.get(archive_key(log_stream_id))
        except NotFound:
            return 0
        wm, pos = 0, 0
        while pos < len(data):
            entries, pos = decode_segment(data, log_stream_id, pos)
            if entries:
                wm = entries[-1].lsn + 1
        return wm

    def read_archive(self, log_stream_id: int) -> list[LogEntry]:
        data = self.store.get(archive_key(log_stream_id))
        out, pos = [], 0
        while pos < len(data):
            entries, pos = decode_segment(data, log_stream_id, pos)
            out.extend(entries)
        return out

    def forget_archive_progress(self, log_stream_id: int) -> None:
        """Drop the in-memory archive watermark, as an archiver crash would."""
        self._archive_wm[log_stream_id] = None
