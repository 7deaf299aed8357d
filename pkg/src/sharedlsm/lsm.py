"""The tablet storage engine.

Writes land in a multiversion MemTable.  Micro compaction cuts a prefix of the
MemTable by scn into a small local SSTable so the log checkpoint can move
before a freeze; mini compaction dumps a frozen MemTable.  Both stay on the
node's local disk until the SSWriter uploads them.  Minor compaction merges
uploaded increments in shared storage and reuses macro-blocks that overlap
nothing else.  Major compaction folds increments into a new baseline; the
multi-phase round with replica checksum verification lives in
:class:`MajorCompaction`, and :func:`offload_compaction` runs it on a borrowed
worker node.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import OrderedDict
from itertools import groupby
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

from .clock import SECOND
from .core import (
    MACRO_TARGET,
    MICRO_TARGET,
    MacroBlock,
    MacroRef,
    MicroBlock,
    Row,
    Scn,
    SsTable,
    SsTableKind,
    build_sstable,
    decode_macro_block,
    logical_checksum,
    sort_rows,
    visible_rows,
)
from .errors import (
    ChecksumMismatch,
    CorruptBlock,
    LeaseExpired,
    MemTableFull,
    NonContiguousInputs,
    SimulatedCrash,
    SnapshotTooOld,
)
from .faults import CrashPoints, points
from .metadata import MetadataService, MetaLevel, SsLogRecord, dumps
from .objstore import ObjectStore

log = logging.getLogger(__name__)

MEMTABLE_LIMIT = 1 << 20
MICRO_FILL = 0.5
MICRO_INTERVAL_MS = 1 * SECOND
MINOR_TRIGGER = 4
MAJOR_TRIGGER = 8
MAX_VERIFY_RETRIES = 3


@dataclass
class EngineConfig:
    memtable_limit: int = MEMTABLE_LIMIT
    micro_fill: float = MICRO_FILL
    micro_interval_ms: float = MICRO_INTERVAL_MS
    micro_target: int = MICRO_TARGET
    macro_target: int = MACRO_TARGET
    minor_trigger: int = MINOR_TRIGGER
    major_trigger: int = MAJOR_TRIGGER

    def __post_init__(self):
        if self.memtable_limit <= 0:
            raise ValueError("memtable_limit must be positive")
        if not 0 < self.micro_fill <= 1:
            raise ValueError("micro_fill must be in (0, 1]")


def row_size(row: Row) -> int:
    return 17 + len(row.key) + len(row.value)


# -- block access ---------------------------------------------------------------


class BlockSource(Protocol):
    def macro(self, ref: MacroRef) -> MacroBlock: ...

    def micro(self, ref: MacroRef, idx: int) -> MicroBlock: ...


class DirectSource:
    """Reads blocks from the node's local disk, else the object store.

    Keeps a small decoded-block memo so tight test loops do not re-parse; the
    memo is keyed by content hash, so rewritten objects are never served stale.
    """

    def __init__(self, store: ObjectStore, local: dict[str, bytes] | None = None, memo: int = 256):
        self.store = store
        self.local = {} if local is None else local
        self._memo: OrderedDict[tuple[str, int], MacroBlock] = OrderedDict()
        self._memo_cap = memo
        self.fetches = 0

    def raw(self, ref: MacroRef) -> bytes:
        data = self.local.get(ref.key)
        if data is None:
            self.fetches += 1
            data = self.store.get(ref.key)
        return data

    def macro(self, ref: MacroRef) -> MacroBlock:
        mk = (ref.key, ref.content_hash)
        hit = self._memo.get(mk)
        if hit is not None:
            self._memo.move_to_end(mk)
            return hit
        block = decode_macro_block(self.raw(ref), ref.block_id)
        if block.content_hash != ref.content_hash:
            raise CorruptBlock(f"{ref.key}: content hash does not match metadata")
        self._memo[mk] = block
        if len(self._memo) > self._memo_cap:
            self._memo.popitem(last=False)
        return block

    def micro(self, ref: MacroRef, idx: int) -> MicroBlock:
        return self.macro(ref).micro_blocks[idx]


def sstable_rows(table: SsTable, source: BlockSource) -> list[Row]:
    out: list[Row] = []
    for ref in table.macro_blocks:
        out.extend(source.macro(ref).rows())
    return out


# -- MemTable -------------------------------------------------------------------


class MemTable:
    """Sorted multiversion buffer; versions per key are kept newest first."""

    def __init__(self, tablet_id: int, limit: int = MEMTABLE_LIMIT):
        self.tablet_id = tablet_id
        self.limit = limit
        self.entries: dict[bytes, list[Row]] = {}
        self.frozen = False
        self.end_scn: Scn | None = None
        self.size = 0

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def empty(self) -> bool:
        return not self.entries

    @property
    def min_unpersisted_scn(self) -> Scn | None:
        if not self.entries:
            return None
        return min(v[-1].commit_scn for v in self.entries.values())

    def put(self, row: Row) -> None:
        if self.frozen:
            raise ValueError("frozen MemTable accepts no writes")
        size = row_size(row)
        if self.size + size > self.limit and self.entries:
            raise MemTableFull(f"tablet {self.tablet_id}: {self.size + size} > {self.limit}")
        versions = self.entries.setdefault(row.key, [])
        i = 0
        while i < len(versions) and versions[i].commit_scn > row.commit_scn:
            i += 1
        if i < len(versions) and versions[i].commit_scn == row.commit_scn:
            self.size -= row_size(versions[i])
            versions[i] = row
        else:
            versions.insert(i, row)
        self.size += size

    def get(self, key: bytes, read_scn: Scn) -> Row | None:
        for row in self.entries.get(key, ()):
            if row.commit_scn <= read_scn:
                return row
        return None

    def rows(self, lo: bytes | None = None, hi: bytes | None = None) -> list[Row]:
        out = []
        for key in sorted(self.entries):
            if (lo is None or key >= lo) and (hi is None or key < hi):
                out.extend(self.entries[key])
        return out

    def take_upto(self, cut: Scn) -> list[Row]:
        """Remove and return, in canonical order, every row with scn <= cut."""
        out = []
        for key in sorted(self.entries):
            versions = self.entries[key]
            keep = [r for r in versions if r.commit_scn > cut]
            out.extend(r for r in versions if r.commit_scn <= cut)
            if keep:
                self.entries[key] = keep
            else:
                del self.entries[key]
        self.size -= sum(row_size(r) for r in out)
        return out


# -- SSTable sets ---------------------------------------------------------------


@dataclass
class SsTableSet:
    tablet_id: int
    major: SsTable | None = None
    increments: list[SsTable] = field(default_factory=list)

    def validate(self) -> None:
        prev_end = self.major.end_scn if self.major else 0
        for t in self.increments:
            if t.kind is SsTableKind.MAJOR:
                raise ValueError("a major sstable cannot be an increment")
            if t.start_scn <= prev_end:
                raise ValueError(f"increment {t.key} overlaps scn {prev_end}")
            prev_end = t.end_scn

    def newest_first(self) -> list[SsTable]:
        out = list(reversed(self.increments))
        if self.major is not None:
            out.append(self.major)
        return out

    def to_payload(self, floor: Scn) -> dict:
        return {
            "major": self.major.to_dict() if self.major else None,
            "increments": [t.to_dict() for t in self.increments],
            "floor": floor,
        }

    @classmethod
    def from_payload(cls, tablet_id: int, payload: dict | None) -> tuple[SsTableSet, Scn]:
        if not payload:
            return cls(tablet_id), 0
        major = SsTable.from_dict(payload["major"]) if payload.get("major") else None
        incs = [SsTable.from_dict(d) for d in payload.get("increments", [])]
        return cls(tablet_id, major, incs), payload.get("floor", 0)


def garbage_key(tablet_id: int, scn: Scn, tag: str) -> bytes:
    return f"garbage/{tablet_id}/{scn:020d}/{tag}".encode()


def garbage_record(tablet_id: int, scn: Scn, tag: str, keys: Iterable[str]) -> SsLogRecord:
    """Objects that no current metadata references, retired at ``scn``."""
    return SsLogRecord(garbage_key(tablet_id, scn, tag), dumps({"keys": sorted(set(keys)), "scn": scn}))


def unreferenced(old: Iterable[SsTable], new: Iterable[SsTable]) -> list[str]:
    live = {k for t in new for k in [t.key, *t.block_keys]}
    return sorted({k for t in old for k in [t.key, *t.block_keys]} - live)


# -- merging --------------------------------------------------------------------


def _overlaps(a: MacroRef, b: MacroRef) -> bool:
    return a.first_key <= b.last_key and b.first_key <= a.last_key


def reusable_blocks(inputs: Sequence[SsTable]) -> set[str]:
    """Blocks whose key range overlaps no block of any other input."""
    keep = set()
    for i, t in enumerate(inputs):
        others = [b for j, u in enumerate(inputs) if j != i for b in u.macro_blocks]
        for ref in t.macro_blocks:
            if not any(_overlaps(ref, o) for o in others):
                keep.add(ref.key)
    return keep


def merge_minor(
    tablet_id: int,
    inputs: Sequence[SsTable],
    source: BlockSource,
    sink: Callable[[str, bytes], object],
    config: EngineConfig | None = None,
) -> SsTable:
    cfg = config or EngineConfig()
    reuse = reusable_blocks(inputs)
    reused: list[MacroRef] = []
    fresh: list[Row] = []
    every: list[Row] = []
    for t in inputs:
        for ref in t.macro_blocks:
            rows = list(source.macro(ref).rows())
            every.extend(rows)
            if ref.key in reuse:
                reused.append(ref)
            else:
                fresh.extend(rows)
    return build_sstable(
        SsTableKind.MINOR,
        tablet_id,
        inputs[0].start_scn,
        inputs[-1].end_scn,
        sort_rows(fresh),
        sink,
        cfg.micro_target,
        cfg.macro_target,
        reused=reused,
        all_rows=sort_rows(every),
    )


def retain_versions(rows: Sequence[Row], floor: Scn) -> list[Row]:
    """Versions a baseline must keep so reads at any scn >= floor are unchanged.

    Per key: everything newer than ``floor`` plus the newest version at or
    below it.  Tombstones at the bottom of what is kept hide nothing and are
    dropped, since a baseline has no older layer beneath it.
    """
    out: list[Row] = []
    for _, versions in groupby(rows, key=lambda r: r.key):
        versions = list(versions)
        kept = [r for r in versions if r.commit_scn > floor]
        base = next((r for r in versions if r.commit_scn <= floor), None)
        if base is not None:
            kept.append(base)
        while kept and kept[-1].tombstone:
            kept.pop()
        out.extend(kept)
    return out


def merge_major(
    tablet_id: int,
    major: SsTable | None,
    increments: Sequence[SsTable],
    merge_scn: Scn,
    floor: Scn,
    source: BlockSource,
    sink: Callable[[str, bytes], object],
    config: EngineConfig | None = None,
) -> SsTable:
    cfg = config or EngineConfig()
    rows: list[Row] = []
    for t in ([major] if major else []) + list(increments):
        rows.extend(sstable_rows(t, source))
    kept = retain_versions(sort_rows(rows), min(floor, merge_scn))
    return build_sstable(
        SsTableKind.MAJOR, tablet_id, 0, merge_scn, kept, sink, cfg.micro_target, cfg.macro_target
    )


# -- the tablet -----------------------------------------------------------------


def private_key(tablet_id: int) -> str:
    return f"private/tablet/{tablet_id}"


class Tablet:
    """One tablet's engine on one node.

    ``local`` is the node's local disk (survives a process crash); ``store``
    is shared storage.  With ``meta`` set, uploads and compactions are fenced
    by the node's SSWriter lease on ``log_stream_id`` and published to the
    tablet's metadata.
    """

    def __init__(
        self,
        tablet_id: int,
        store: ObjectStore,
        *,
        log_stream_id: int = 1,
        local: dict[str, bytes] | None = None,
        source: BlockSource | None = None,
        config: EngineConfig | None = None,
        meta: MetadataService | None = None,
        node_id: int = 0,
        crash: CrashPoints | None = None,
    ):
        self.tablet_id = tablet_id
        self.store = store
        self.log_stream_id = log_stream_id
        self.local = {} if local is None else local
        self.source = source or DirectSource(store, self.local)
        self.config = config or EngineConfig()
        self.meta = meta
        self.node_id = node_id
        self.crash = points(crash)
        self.active = MemTable(tablet_id, self.config.memtable_limit)
        self.frozen: list[MemTable] = []
        self.tables = SsTableSet(tablet_id)
        self.uploaded: set[str] = set()
        self.checkpoint: Scn = 0
        self.applied_scn: Scn = 0
        self.floor: Scn = 0
        self.minis_since_major = 0
        self.last_micro_ms = 0.0

    # -- writes --------------------------------------------------------------
    @property
    def sealed_scn(self) -> Scn:
        return max([self.checkpoint] + [m.end_scn for m in self.frozen])

    def write_row(self, row: Row) -> None:
        if row.commit_scn <= self.sealed_scn:
            raise ValueError(f"scn {row.commit_scn} is at or below sealed scn {self.sealed_scn}")
        try:
            self.active.put(row)
        except MemTableFull:
            self.freeze()
            self.mini_compact()
            self.active.put(row)
        self.applied_scn = max(self.applied_scn, row.commit_scn)

    def memory_bytes(self) -> int:
        return self.active.size + sum(m.size for m in self.frozen)

    def _local_sink(self, key: str, data: bytes) -> None:
        self.local[key] = data

    def _register_local(self, table: SsTable) -> None:
        self.local[table.key] = table.manifest()
        self.tables.increments.append(table)
        self.tables.validate()

    def micro_compact(self, cut: Scn | None = None) -> SsTable | None:
        """Dump active rows with scn <= cut; the checkpoint moves to cut."""
        while self.frozen:
            self.mini_compact()
        cut = self.applied_scn if cut is None else cut
        if self.active.empty or cut <= self.checkpoint:
            return None
        rows = self.active.take_upto(cut)
        if not rows:
            return None
        table = build_sstable(
            SsTableKind.MICRO,
            self.tablet_id,
            self.checkpoint + 1,
            cut,
            rows,
            self._local_sink,
            self.config.micro_target,
            self.config.macro_target,
        )
        self._register_local(table)
        self.checkpoint = cut
        self.save_private()
        return table

    def freeze(self, at_scn: Scn | None = None) -> MemTable:
        end = max(self.applied_scn, self.sealed_scn) if at_scn is None else at_scn
        if end < self.applied_scn or end < self.sealed_scn:
            raise ValueError(f"cannot freeze at {end}: rows up to {self.applied_scn} already applied")
        frozen = self.active
        frozen.frozen = True
        frozen.end_scn = end
        self.frozen.append(frozen)
        self.active = MemTable(self.tablet_id, self.config.memtable_limit)
        self.applied_scn = max(self.applied_scn, end)
        return frozen

    def mini_compact(self) -> SsTable | None:
        """Dump the oldest frozen MemTable; an empty one only moves the checkpoint."""
        if not self.frozen:
            return None
        mem = self.frozen[0]
        end = mem.end_scn
        table = None
        if mem.empty:
            if self.meta is not None and end > self.checkpoint:
                self.meta.put_json(
                    f"ckpt/{self.node_id}/{self.tablet_id}", {"scn": end, "empty_dump": True}
                )
        elif end > self.checkpoint:
            table = build_sstable(
                SsTableKind.MINI,
                self.tablet_id,
                self.checkpoint + 1,
                end,
                mem.rows(),
                self._local_sink,
                self.config.micro_target,
                self.config.macro_target,
            )
            self._register_local(table)
            self.minis_since_major += 1
        self.frozen.pop(0)
        self.checkpoint = max(self.checkpoint, end)
        self.save_private()
        return table

    # -- shared storage ------------------------------------------------------
    def _fence(self) -> dict:
        return {"node": self.node_id, "log_stream_id": self.log_stream_id}

    def _check_lease(self) -> None:
        if self.meta is not None and not self.meta.verify(self.log_stream_id, self.node_id):
            raise LeaseExpired(f"node {self.node_id} is not SSWriter for stream {self.log_stream_id}")

    def shared_payload(self) -> dict:
        shared = SsTableSet(
            self.tablet_id,
            self.tables.major,
            [t for t in self.tables.increments if t.key in self.uploaded],
        )
        return shared.to_payload(self.floor)

    def refresh(self) -> None:
        """Adopt the tablet's shared metadata if someone else changed it."""
        if self.meta is None:
            return
        payload = self.meta.read_meta(MetaLevel.TABLET, self.tablet_id)
        if payload is not None:
            self.apply_meta(payload)

    def apply_meta(self, payload: dict) -> None:
        shared, floor = SsTableSet.from_payload(self.tablet_id, payload)
        last = shared.increments[-1].end_scn if shared.increments else (
            shared.major.end_scn if shared.major else 0
        )
        local_only = [
            t for t in self.tables.increments if t.key not in self.uploaded and t.start_scn > last
        ]
        if shared.major is not None and (
            self.tables.major is None or shared.major.end_scn > self.tables.major.end_scn
        ):
            self.minis_since_major = 0
        self.tables = SsTableSet(self.tablet_id, shared.major, shared.increments + local_only)
        self.tables.validate()
        self.uploaded = {t.key for t in shared.increments}
        self.floor = max(self.floor, floor)
        self.save_private()

    def _publish(self, extra: Sequence[SsLogRecord] = ()) -> None:
        if self.meta is not None:
            self.meta.meta_update(
                MetaLevel.TABLET, self.tablet_id, self.shared_payload(), extra, **self._fence()
            )

    def upload_increments(self) -> list[str]:
        """Copy locally cached increments to shared storage; one metadata commit."""
        self._check_lease()
        self.refresh()
        pending = [t for t in self.tables.increments if t.key not in self.uploaded]
        if not pending:
            return []
        keys = []
        for t in pending:
            for k in t.block_keys:
                self.store.put(k, self.local[k])
                keys.append(k)
            self.store.put(t.key, t.manifest())
            keys.append(t.key)
            self.crash.hit("upload.after_table")
        self._check_lease()
        self.uploaded.update(t.key for t in pending)
        try:
            self._publish()
        except BaseException:
            self.uploaded.difference_update(t.key for t in pending)
            raise
        self.save_private()
        return keys

    def minor_compact(self, inputs: Sequence[str] | None = None) -> SsTable:
        self._check_lease()
        self.refresh()
        incs = self.tables.increments
        if inputs is None:
            chosen = [t for t in incs if t.key in self.uploaded]
        else:
            by_key = {t.key: i for i, t in enumerate(incs)}
            missing = [k for k in inputs if k not in by_key]
            if missing:
                raise KeyError(f"unknown increments {missing}")
            idx = sorted(by_key[k] for k in inputs)
            if idx != list(range(idx[0], idx[0] + len(idx))):
                raise NonContiguousInputs("minor compaction inputs must be adjacent increments")
            chosen = [incs[i] for i in idx]
        if len(chosen) < 2:
            raise ValueError("minor compaction needs at least two increments")
        not_shared = [t.key for t in chosen if t.key not in self.uploaded]
        if not_shared:
            raise ValueError(f"inputs not yet in shared storage: {not_shared}")
        out = merge_minor(self.tablet_id, chosen, self.source, self.store.put, self.config)
        self.store.put(out.key, out.manifest())
        self.crash.hit("minor.after_write")
        self._check_lease()
        first = incs.index(chosen[0])
        self.tables.increments = incs[:first] + [out] + incs[first + len(chosen) :]
        self.tables.validate()
        self.uploaded.difference_update(t.key for t in chosen)
        self.uploaded.add(out.key)
        dead = unreferenced(chosen, [out])
        self._publish([garbage_record(self.tablet_id, out.end_scn, f"minor-{out.start_scn}", dead)])
        self.save_private()
        return out

    def major_compact(self, merge_scn: Scn | None = None, floor: Scn | None = None) -> SsTable:
        """In-place baseline merge over the shared increments up to ``merge_scn``."""
        self._check_lease()
        self.refresh()
        shared = [t for t in self.tables.increments if t.key in self.uploaded]
        merge_scn, consumed = pick_merge(self.tables.major, shared, merge_scn)
        if not consumed and self.tables.major is not None and self.tables.major.end_scn == merge_scn:
            return self.tables.major
        floor = merge_scn if floor is None else min(floor, merge_scn)
        floor = max(floor, self.floor)
        out = merge_major(
            self.tablet_id,
            self.tables.major,
            consumed,
            merge_scn,
            floor,
            self.source,
            self.store.put,
            self.config,
        )
        self.store.put(out.key, out.manifest())
        self._check_lease()
        old = ([self.tables.major] if self.tables.major else []) + consumed
        self.tables = SsTableSet(
            self.tablet_id, out, [t for t in self.tables.increments if t not in consumed]
        )
        self.uploaded.difference_update(t.key for t in consumed)
        self.floor = floor
        self.minis_since_major = 0
        dead = unreferenced(old, [out])
        self._publish([garbage_record(self.tablet_id, merge_scn, "major", dead)])
        self.save_private()
        return out

    def maybe_compact(self) -> SsTable | None:
        """Apply the merge policy: minor at >= minor_trigger shared increments."""
        shared = [t for t in self.tables.increments if t.key in self.uploaded]
        if self.minis_since_major >= self.config.major_trigger and shared:
            return self.major_compact()
        if len(shared) >= self.config.minor_trigger:
            return self.minor_compact([t.key for t in shared])
        return None

    # -- reads ---------------------------------------------------------------
    def read_row(self, key: bytes, read_scn: Scn) -> Row | None:
        if read_scn < self.floor:
            raise SnapshotTooOld(f"read at {read_scn} below retained floor {self.floor}")
        row = self.active.get(key, read_scn)
        if row is None:
            for mem in reversed(self.frozen):
                row = mem.get(key, read_scn)
                if row is not None:
                    break
        if row is None:
            for table in self.tables.newest_first():
                if table.start_scn > read_scn:
                    continue
                ref = table.candidate(key)
                if ref is None:
                    continue
                row = self.source.micro(ref, ref.micro_for(key)).find(key, read_scn)
                if row is not None:
                    break
        return row

    def read(self, key: bytes, read_scn: Scn) -> bytes | None:
        """Value visible at ``read_scn``; None when absent or deleted."""
        row = self.read_row(key, read_scn)
        return None if row is None or row.tombstone else row.value

    def all_rows(self, lo: bytes | None = None, hi: bytes | None = None) -> list[Row]:
        rows = self.active.rows(lo, hi)
        for mem in self.frozen:
            rows.extend(mem.rows(lo, hi))
        for table in self.tables.newest_first():
            for ref in table.macro_blocks:
                if (hi is not None and ref.first_key >= hi) or (lo is not None and ref.last_key < lo):
                    continue
                rows.extend(
                    r
                    for r in self.source.macro(ref).rows()
                    if (lo is None or r.key >= lo) and (hi is None or r.key < hi)
                )
        return sort_rows(rows)

    def scan(self, lo: bytes | None, hi: bytes | None, read_scn: Scn) -> list[Row]:
        if read_scn < self.floor:
            raise SnapshotTooOld(f"scan at {read_scn} below retained floor {self.floor}")
        return list(visible_rows(self.all_rows(lo, hi), read_scn))

    def read_state_checksum(self, read_scn: Scn) -> int:
        return logical_checksum(self.scan(None, None, read_scn))

    # -- crash recovery ------------------------------------------------------
    def save_private(self) -> None:
        self.local[private_key(self.tablet_id)] = json.dumps(
            {
                "checkpoint": self.checkpoint,
                "major": self.tables.major.to_dict() if self.tables.major else None,
                "increments": [t.to_dict() for t in self.tables.increments],
                "uploaded": sorted(self.uploaded),
                "floor": self.floor,
            },
            sort_keys=True,
        ).encode()

    @classmethod
    def restore(cls, tablet_id: int, store: ObjectStore, local: dict[str, bytes], **kw) -> Tablet:
        """Rebuild from local disk after a crash; the caller replays CLog above
        :attr:`checkpoint`."""
        t = cls(tablet_id, store, local=local, **kw)
        raw = local.get(private_key(tablet_id))
        if raw is None:
            return t
        st = json.loads(raw)
        t.checkpoint = st["checkpoint"]
        t.applied_scn = st["checkpoint"]
        t.floor = st["floor"]
        t.tables = SsTableSet(
            tablet_id,
            SsTable.from_dict(st["major"]) if st["major"] else None,
            [SsTable.from_dict(d) for d in st["increments"]],
        )
        t.uploaded = set(st["uploaded"])
        return t

    def replay(self, rows: Iterable[Row]) -> int:
        """Apply CLog rows above the checkpoint; returns how many were applied."""
        n = 0
        for row in rows:
            if row.commit_scn > self.checkpoint:
                self.write_row(row)
                n += 1
        return n

    def private_bytes(self) -> int:
        """Bytes of dumped data that exist only on this node's local disk."""
        return sum(t.size_bytes for t in self.tables.increments if t.key not in self.uploaded)


def pick_merge(
    major: SsTable | None, shared: Sequence[SsTable], merge_scn: Scn | None
) -> tuple[Scn, list[SsTable]]:
    """Resolve the merge snapshot and the increments it consumes.

    The snapshot must sit on an sstable boundary so no increment is split.
    """
    base = major.end_scn if major else 0
    if merge_scn is None:
        merge_scn = shared[-1].end_scn if shared else base
    consumed = [t for t in shared if t.end_scn <= merge_scn]
    bounds = {base} | {t.end_scn for t in shared}
    if merge_scn not in bounds or merge_scn < base:
        raise ValueError(f"merge scn {merge_scn} is not an sstable boundary")
    return merge_scn, consumed


# -- the multi-phase major compaction round --------------------------------------


class TaskState(str, enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    VERIFIED = "verified"


@dataclass
class CompactionTask:
    tablet_id: int
    kind: SsTableKind
    merge_scn: Scn
    inputs: tuple[str, ...] = ()
    state: TaskState = TaskState.PENDING
    output: str | None = None

    @property
    def key(self) -> str:
        return task_key(self.tablet_id, self.merge_scn)

    def to_dict(self) -> dict:
        return {
            "tablet": self.tablet_id,
            "kind": self.kind.value,
            "merge_scn": self.merge_scn,
            "inputs": list(self.inputs),
            "state": self.state.value,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CompactionTask:
        return cls(
            d["tablet"],
            SsTableKind(d["kind"]),
            d["merge_scn"],
            tuple(d["inputs"]),
            TaskState(d["state"]),
            d["output"],
        )


def task_key(tablet_id: int, merge_scn: Scn) -> str:
    return f"task/mc/{tablet_id}/{merge_scn}"


@dataclass
class CompactionReplica:
    """A compute replica taking part in verification.

    ``warm`` preloads a new baseline into its caches; ``refresh`` drops and
    refetches the given blocks when its checksum disagreed.
    """

    node_id: int
    source: BlockSource
    warm: Callable[[SsTable], None] | None = None
    refresh: Callable[[SsTable], None] | None = None


@dataclass
class RoundReport:
    merge_scn: dict[int, Scn]
    outputs: dict[int, SsTable]
    retries: dict[tuple[int, int], int]
    phases: list[str]


def replica_checksum(table: SsTable, source: BlockSource) -> int | None:
    try:
        return logical_checksum(sstable_rows(table, source))
    except CorruptBlock:
        return None


class MajorCompaction:
    """Root-service driven baseline merge with replica checksum verification.

    Phases: initiate, schedule, merge, publish, replica warm-and-report,
    verify (with bounded retry), complete.  Each tablet's task is keyed by
    (tablet, merge_scn) so a re-dispatched round skips finished work.
    """

    def __init__(
        self,
        meta: MetadataService,
        store: ObjectStore,
        config: EngineConfig | None = None,
        *,
        max_retries: int = MAX_VERIFY_RETRIES,
        crash: CrashPoints | None = None,
    ):
        self.meta = meta
        self.store = store
        self.config = config or EngineConfig()
        self.max_retries = max_retries
        self.crash = points(crash)
        self.round = 0

    def task(self, tablet_id: int, merge_scn: Scn) -> CompactionTask | None:
        d = self.meta.view.get_json(task_key(tablet_id, merge_scn).encode())
        return None if d is None else CompactionTask.from_dict(d)

    def _save(self, task: CompactionTask, **fence) -> None:
        self.meta.put_json(task.key, task.to_dict(), **fence)

    def run(
        self,
        tablets: Sequence[int],
        worker: int,
        fence_stream: int,
        replicas: Sequence[CompactionReplica] = (),
        *,
        merge_scn: dict[int, Scn] | None = None,
        floor: dict[int, Scn] | None = None,
        index_pairs: Sequence[tuple[int, int]] = (),
    ) -> RoundReport:
        phases: list[str] = []
        fence = {"node": worker, "log_stream_id": fence_stream}
        source = DirectSource(self.store)

        # 1: initiate; replicas see the round record when they next poll SSLog
        self.round += 1
        targets: dict[int, Scn] = {}
        sets: dict[int, tuple[SsTableSet, Scn]] = {}
        for tid in tablets:
            payload = self.meta.read_meta(MetaLevel.TABLET, tid)
            sets[tid] = SsTableSet.from_payload(tid, payload)
            tset = sets[tid][0]
            want = (merge_scn or {}).get(tid)
            targets[tid], _ = pick_merge(tset.major, tset.increments, want)
        self.meta.put_json("mc/round", {"round": self.round, "merge_scn": {str(k): v for k, v in targets.items()}})
        phases.append("initiate")

        # 2: schedule a task per tablet
        tasks = {}
        for tid in tablets:
            task = self.task(tid, targets[tid])
            if task is None:
                tset = sets[tid][0]
                _, consumed = pick_merge(tset.major, tset.increments, targets[tid])
                task = CompactionTask(tid, SsTableKind.MAJOR, targets[tid], tuple(t.key for t in consumed))
                self._save(task)
            tasks[tid] = task
        phases.append("schedule")
        self.crash.hit("mc.after_schedule")

        # 3 and 4: merge on the worker, then publish under its lease
        outputs: dict[int, SsTable] = {}
        for tid in tablets:
            task = tasks[tid]
            tset, old_floor = sets[tid]
            m = targets[tid]
            if task.state in (TaskState.DONE, TaskState.VERIFIED):
                outputs[tid] = tset.major
                continue
            _, consumed = pick_merge(tset.major, tset.increments, m)
            if tset.major is not None and tset.major.end_scn == m and not consumed:
                out = tset.major
            else:
                f = m if floor is None or tid not in floor else min(floor[tid], m)
                f = max(f, old_floor)
                out = merge_major(tid, tset.major, consumed, m, f, source, self.store.put, self.config)
                self.store.put(out.key, out.manifest())
                self.crash.hit("mc.after_merge")
                old = ([tset.major] if tset.major else []) + list(consumed)
                rest = [t for t in tset.increments if t not in consumed]
                new_set = SsTableSet(tid, out, rest)
                self.meta.meta_update(
                    MetaLevel.TABLET,
                    tid,
                    new_set.to_payload(f),
                    [garbage_record(tid, m, "major", unreferenced(old, [out]))],
                    **fence,
                )
                self.crash.hit("mc.after_publish")
            task.state, task.output = TaskState.DONE, out.key
            self._save(task, **fence)
            outputs[tid] = out
        phases.extend(["merge", "publish"])

        # 5: replicas pick up the new baseline, warm it and report a crc
        reports: dict[tuple[int, int], int | None] = {}
        for tid, out in outputs.items():
            for rep in replicas:
                if rep.warm is not None:
                    rep.warm(out)
                reports[(tid, rep.node_id)] = replica_checksum(out, rep.source)
                self.meta.put_json(f"mc/crc/{tid}/{targets[tid]}/{rep.node_id}", reports[(tid, rep.node_id)])
        phases.append("report")

        # 6: verify cross-replica and primary-vs-index checksums, retrying
        retries: dict[tuple[int, int], int] = {}
        for (tid, node), crc in sorted(reports.items()):
            out = outputs[tid]
            rep = next(r for r in replicas if r.node_id == node)
            n = 0
            while crc != out.checksum:
                if n >= self.max_retries:
                    raise ChecksumMismatch(
                        f"tablet {tid} replica {node}: crc {crc} != {out.checksum} after {n} retries"
                    )
                n += 1
                log.info("checksum mismatch on tablet %s replica %s, retry %s", tid, node, n)
                if rep.refresh is not None:
                    rep.refresh(out)
                crc = replica_checksum(out, rep.source)
                self.meta.put_json(f"mc/crc/{tid}/{targets[tid]}/{node}", crc)
            retries[(tid, node)] = n
        for a, b in index_pairs:
            if outputs[a].checksum != outputs[b].checksum:
                raise ChecksumMismatch(f"primary tablet {a} and index tablet {b} disagree")
        for tid in tablets:
            task = self.task(tid, targets[tid])
            task.state = TaskState.VERIFIED
            self._save(task)
        phases.append("verify")

        # 7: complete
        self.meta.put_json("mc/round", {"round": self.round, "complete": True})
        phases.append("complete")
        return RoundReport(targets, outputs, retries, phases)


# -- offloading -----------------------------------------------------------------


@dataclass
class WorkerPool:
    """Underutilised machines available for compaction offloading."""

    idle: set[int] = field(default_factory=set)
    busy: set[int] = field(default_factory=set)

    def take(self, worker: int | None = None) -> int:
        if worker is None:
            if not self.idle:
                raise RuntimeError("no idle worker")
            worker = min(self.idle)
        if worker not in self.idle:
            raise ValueError(f"worker {worker} is not in the idle pool")
        self.idle.discard(worker)
        self.busy.add(worker)
        return worker

    def give_back(self, worker: int) -> None:
        self.busy.discard(worker)
        self.idle.add(worker)


CARRIER_BASE = 1 << 20


def carrier_stream_id(tablets: Sequence[int]) -> int:
    return CARRIER_BASE + min(tablets)


def offload_compaction(
    mc: MajorCompaction,
    pool: WorkerPool,
    tablets: Sequence[int],
    replicas: Sequence[CompactionReplica] = (),
    *,
    worker: int | None = None,
    merge_scn: dict[int, Scn] | None = None,
    floor: dict[int, Scn] | None = None,
    index_pairs: Sequence[tuple[int, int]] = (),
) -> RoundReport:
    """Run a major compaction round on a borrowed worker.

    The worker gets a carrier log stream describing the tablets, takes the
    SSWriter lease on it, compacts, has the replicas preload and verify, then
    drops the lease and returns to the pool.  A crashed worker keeps its lease
    until expiry; re-dispatching after that resumes from the task records.
    """
    w = pool.take(worker)
    logsvc = mc.meta.log
    carrier = carrier_stream_id(tablets)
    if carrier not in logsvc.streams:
        logsvc.create_stream(carrier, w)
    else:
        logsvc.set_owner(carrier, w)
    logsvc.append(carrier, [dumps({"tablets": list(tablets)})], writer=w)
    mc.meta.acquire_sswriter(carrier, w)
    try:
        report = mc.run(
            tablets,
            w,
            carrier,
            replicas,
            merge_scn=merge_scn,
            floor=floor,
            index_pairs=index_pairs,
        )
    except SimulatedCrash:
        # the worker is gone; its lease lapses on its own
        pool.busy.discard(w)
        raise
    mc.meta.release_sswriter(carrier, w)
    pool.give_back(w)
    return report


# -- write admission under a memory budget ---------------------------------------


class DumpGovernor:
    """Admits writes while MemTable bytes plus bytes still being dumped fit in
    the memory limit.

    Dumps drain at ``dump_bandwidth`` bytes per ms, one after another; their
    memory is released only when they finish.  In fast mode a micro compaction
    starts at ``micro_fill`` of the limit or every ``micro_interval_ms``; in
    freeze-only mode the MemTable is frozen and dumped only when full.
    """

    def __init__(self, tablet: Tablet, dump_bandwidth: float, fast: bool = True):
        if dump_bandwidth <= 0:
            raise ValueError("dump_bandwidth must be positive")
        self.tablet = tablet
        self.bandwidth = dump_bandwidth
        self.fast = fast
        self.limit = tablet.config.memtable_limit
        self.held: list[tuple[float, int]] = []
        self.busy_until = 0.0
        self.last_dump_ms = 0.0
        self.dumps = 0

    def held_bytes(self, now: float) -> int:
        self.held = [(t, n) for t, n in self.held if t > now]
        return sum(n for _, n in self.held)

    def _dump(self, now: float, nbytes: int) -> None:
        done = max(now, self.busy_until) + nbytes / self.bandwidth
        self.busy_until = done
        self.held.append((done, nbytes))
        self.last_dump_ms = now
        self.dumps += 1

    def tick(self, now: float) -> None:
        t = self.tablet
        if not self.fast or t.active.empty:
            return
        cfg = t.config
        if t.active.size >= cfg.micro_fill * self.limit or now - self.last_dump_ms >= cfg.micro_interval_ms:
            nbytes = t.active.size
            t.micro_compact()
            self._dump(now, nbytes)

    def admit(self, size: int, now: float) -> bool:
        """Whether ``size`` more bytes fit now, dumping first if that helps."""
        t = self.tablet
        self.tick(now)
        if t.active.size + self.held_bytes(now) + size <= self.limit:
            return True
        if not t.active.empty:
            nbytes = t.active.size
            if self.fast:
                t.micro_compact()
            else:
                t.freeze()
                t.mini_compact()
            self._dump(now, nbytes)
        return t.active.size + self.held_bytes(now) + size <= self.limit

    def offer(self, row: Row, now: float) -> bool:
        if not self.admit(row_size(row), now):
            return False
        self.tablet.write_row(row)
        return True


@dataclass
class IngestResult:
    accepted_per_bucket: list[int]
    stalls: int
    accepted: int
    offered: int


def simulate_ingest(
    governor: DumpGovernor,
    rows: Sequence[Row],
    rate_bytes_per_ms: float,
    *,
    step_ms: float = 1.0,
    bucket_ms: float = 100.0,
) -> IngestResult:
    """Offer ``rows`` arriving at a fixed byte rate; count stall buckets.

    A stall bucket is a window in which writes were waiting yet none was
    accepted.
    """
    queue: list[Row] = []
    arrivals = iter(rows)
    credit = 0.0
    now = 0.0
    buckets: list[int] = []
    stalled: list[bool] = []
    current, waiting = 0, False
    bucket_end = bucket_ms
    accepted = 0
    exhausted = False
    while not exhausted or queue:
        credit += rate_bytes_per_ms * step_ms
        while not exhausted and credit > 0:
            row = next(arrivals, None)
            if row is None:
                exhausted = True
                break
            queue.append(row)
            credit -= row_size(row)
        i = 0
        while i < len(queue) and governor.offer(queue[i], now):
            i += 1
        del queue[:i]
        current += i
        accepted += i
        waiting = waiting or bool(queue)
        now += step_ms
        if now >= bucket_end:
            buckets.append(current)
            stalled.append(current == 0 and waiting)
            current, waiting = 0, False
            bucket_end += bucket_ms
    if current or waiting:
        buckets.append(current)
        stalled.append(current == 0 and waiting)
    return IngestResult(buckets, sum(stalled), accepted, len(rows))
