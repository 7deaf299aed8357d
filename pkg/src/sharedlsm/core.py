"""Rows, block encodings, SSTable descriptors and checksums.

Everything here is immutable once built.  Keys and values are raw bytes
ordered lexicographically; row order inside any run is (key asc, scn desc).
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from .errors import CorruptBlock, OverlappingRanges

Scn = int  # 0 means "unset"
MAX_SCN = (1 << 64) - 1

MICRO_TARGET = 4 * 1024
MACRO_TARGET = 64 * 1024

MACRO_MAGIC = b"BMB1"


def crc32(data: bytes, crc: int = 0) -> int:
    """CRC-32/ISO-HDLC.  Pass a previous result as ``crc`` to continue a stream."""
    return zlib.crc32(data, crc) & 0xFFFFFFFF


@dataclass(frozen=True, order=False)
class Row:
    key: bytes
    value: bytes
    commit_scn: Scn
    tombstone: bool = False

    def __post_init__(self):
        if self.tombstone and self.value:
            raise ValueError("tombstone rows carry an empty value")

    @property
    def sort_key(self):
        return (self.key, -self.commit_scn)

    def serialize(self) -> bytes:
        return b"".join(
            (
                struct.pack(">I", len(self.key)),
                self.key,
                struct.pack(">I", len(self.value)),
                self.value,
                struct.pack(">QB", self.commit_scn, 1 if self.tombstone else 0),
            )
        )

    @classmethod
    def deserialize_from(cls, buf: bytes, pos: int) -> tuple[Row, int]:
        (klen,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        key = bytes(buf[pos : pos + klen])
        pos += klen
        (vlen,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        value = bytes(buf[pos : pos + vlen])
        pos += vlen
        scn, tomb = struct.unpack_from(">QB", buf, pos)
        return cls(key, value, scn, bool(tomb)), pos + 9


def sort_rows(rows: Iterable[Row]) -> list[Row]:
    return sorted(rows, key=lambda r: (r.key, -r.commit_scn))


def logical_checksum(rows: Iterable[Row]) -> int:
    """CRC over the canonical serialization of rows given in canonical order.

    Depends only on row content, never on how rows are packed into blocks.
    """
    crc = 0
    for row in rows:
        crc = zlib.crc32(row.serialize(), crc)
    return crc & 0xFFFFFFFF


def visible_rows(rows: Iterable[Row], read_scn: Scn) -> Iterator[Row]:
    """Newest non-deleted version per key at ``read_scn``; input in canonical order."""
    last_key = None
    for row in rows:
        if row.key == last_key or row.commit_scn > read_scn:
            continue
        last_key = row.key
        if not row.tombstone:
            yield row


# -- blocks ------------------------------------------------------------------


@dataclass(frozen=True)
class MicroBlock:
    rows: tuple[Row, ...]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("empty micro-block")

    @property
    def key_range(self) -> tuple[bytes, bytes]:
        return self.rows[0].key, self.rows[-1].key

    def serialize(self) -> bytes:
        return struct.pack(">I", len(self.rows)) + b"".join(r.serialize() for r in self.rows)

    @property
    def size_bytes(self) -> int:
        return 4 + sum(17 + len(r.key) + len(r.value) for r in self.rows)

    @classmethod
    def deserialize(cls, buf: bytes) -> MicroBlock:
        (n,) = struct.unpack_from(">I", buf, 0)
        pos = 4
        rows = []
        for _ in range(n):
            row, pos = Row.deserialize_from(buf, pos)
            rows.append(row)
        if pos != len(buf):
            raise CorruptBlock("trailing bytes in micro-block")
        return cls(tuple(rows))

    def find(self, key: bytes, read_scn: Scn) -> Row | None:
        for row in self.rows:
            if row.key == key and row.commit_scn <= read_scn:
                return row
            if row.key > key:
                break
        return None


@dataclass(frozen=True)
class MacroBlock:
    id: int
    micro_blocks: tuple[MicroBlock, ...]
    block_index: tuple[tuple[bytes, int], ...]
    content_hash: int
    encoded: bytes = field(repr=False, compare=False)

    @property
    def key_range(self) -> tuple[bytes, bytes]:
        return self.micro_blocks[0].key_range[0], self.micro_blocks[-1].key_range[1]

    @property
    def size_bytes(self) -> int:
        return len(self.encoded)

    def rows(self) -> Iterator[Row]:
        for mb in self.micro_blocks:
            yield from mb.rows


def _check_disjoint(micro_blocks: Sequence[MicroBlock]) -> None:
    for prev, nxt in zip(micro_blocks, micro_blocks[1:]):
        if prev.key_range[1] >= nxt.key_range[0]:
            raise OverlappingRanges(
                f"micro-block ranges overlap: {prev.key_range!r} / {nxt.key_range!r}"
            )


def encode_macro_block(micro_blocks: Sequence[MicroBlock], block_id: int = 0) -> MacroBlock:
    """Serialize micro-blocks into the BMB1 wire format.

    Layout: magic | count u32 | index (u32 keylen, key, u32 offset, u32 length)*
    | micro-block bytes | crc32 u32.  Offsets are relative to the start of the
    micro-block data section.
    """
    micro_blocks = tuple(micro_blocks)
    if not micro_blocks:
        raise ValueError("macro-block needs at least one micro-block")
    _check_disjoint(micro_blocks)
    payloads = [mb.serialize() for mb in micro_blocks]
    index = []
    parts = [MACRO_MAGIC, struct.pack(">I", len(micro_blocks))]
    offset = 0
    for mb, data in zip(micro_blocks, payloads):
        first = mb.key_range[0]
        index.append((first, offset))
        parts.append(struct.pack(">I", len(first)) + first + struct.pack(">II", offset, len(data)))
        offset += len(data)
    parts.extend(payloads)
    body = b"".join(parts)
    h = crc32(body)
    return MacroBlock(block_id, micro_blocks, tuple(index), h, body + struct.pack(">I", h))


def _parse_index(buf: bytes) -> tuple[list[tuple[bytes, int, int]], int]:
    if buf[:4] != MACRO_MAGIC:
        raise CorruptBlock("bad magic")
    (count,) = struct.unpack_from(">I", buf, 4)
    pos = 8
    entries = []
    for _ in range(count):
        (klen,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        key = bytes(buf[pos : pos + klen])
        pos += klen
        off, ln = struct.unpack_from(">II", buf, pos)
        pos += 8
        entries.append((key, off, ln))
    return entries, pos


def decode_macro_block(buf: bytes, block_id: int = 0) -> MacroBlock:
    if len(buf) < 12:
        raise CorruptBlock("macro-block too short")
    body, footer = buf[:-4], buf[-4:]
    (stored,) = struct.unpack(">I", footer)
    if crc32(body) != stored:
        raise CorruptBlock("macro-block crc mismatch")
    entries, data_start = _parse_index(body)
    micro = []
    for key, off, ln in entries:
        mb = MicroBlock.deserialize(body[data_start + off : data_start + off + ln])
        if mb.key_range[0] != key:
            raise CorruptBlock("index does not match micro-block boundary")
        micro.append(mb)
    return MacroBlock(
        block_id, tuple(micro), tuple((k, o) for k, o, _ in entries), stored, bytes(buf)
    )


def micro_slice(buf: bytes, idx: int) -> bytes:
    """Raw bytes of the idx-th micro-block inside an encoded macro-block."""
    entries, data_start = _parse_index(buf)
    _, off, ln = entries[idx]
    return buf[data_start + off : data_start + off + ln]


def pack_rows(
    rows: Sequence[Row], micro_target: int = MICRO_TARGET, macro_target: int = MACRO_TARGET
) -> list[list[MicroBlock]]:
    """Group canonical-order rows into macro-block-sized lists of micro-blocks.

    Splits only between distinct keys so micro-block key ranges stay disjoint.
    """
    groups: list[list[MicroBlock]] = []
    current_macro: list[MicroBlock] = []
    macro_bytes = 0
    pending: list[Row] = []
    pending_bytes = 4

    def close_micro():
        nonlocal pending, pending_bytes, macro_bytes, current_macro
        if not pending:
            return
        mb = MicroBlock(tuple(pending))
        if current_macro and macro_bytes + mb.size_bytes > macro_target:
            groups.append(current_macro)
            current_macro, macro_bytes = [], 0
        current_macro.append(mb)
        macro_bytes += mb.size_bytes
        pending, pending_bytes = [], 4

    for i, row in enumerate(rows):
        size = 17 + len(row.key) + len(row.value)
        new_key = i == 0 or rows[i - 1].key != row.key
        if new_key and pending and pending_bytes + size > micro_target:
            close_micro()
        pending.append(row)
        pending_bytes += size
    close_micro()
    if current_macro:
        groups.append(current_macro)
    return groups


# -- SSTables ----------------------------------------------------------------


class SsTableKind(str, enum.Enum):
    MICRO = "micro"
    MINI = "mini"
    MINOR = "minor"
    MAJOR = "major"


def block_id_for(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "big")


@dataclass(frozen=True)
class MacroRef:
    """What metadata knows about one macro-block without fetching it.

    Carries the block index (first key of every micro-block) so a point read
    can pick the micro-block before touching the data.
    """

    block_id: int
    key: str
    first_key: bytes
    last_key: bytes
    micro_keys: tuple[bytes, ...]
    size: int
    content_hash: int

    def micro_for(self, key: bytes) -> int:
        return max(bisect_right(self.micro_keys, key) - 1, 0)

    def to_dict(self) -> dict:
        return {
            "id": self.block_id,
            "key": self.key,
            "first": self.first_key.hex(),
            "last": self.last_key.hex(),
            "micro": [k.hex() for k in self.micro_keys],
            "size": self.size,
            "hash": self.content_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MacroRef:
        return cls(
            d["id"],
            d["key"],
            bytes.fromhex(d["first"]),
            bytes.fromhex(d["last"]),
            tuple(bytes.fromhex(k) for k in d["micro"]),
            d["size"],
            d["hash"],
        )


@dataclass(frozen=True)
class SsTable:
    kind: SsTableKind
    tablet_id: int
    start_scn: Scn
    end_scn: Scn
    macro_blocks: tuple[MacroRef, ...]
    checksum: int
    row_count: int = 0

    def __post_init__(self):
        if self.kind is SsTableKind.MAJOR and self.start_scn != 0:
            raise ValueError("major sstables cover history from scn 0")
        if self.start_scn > self.end_scn:
            raise ValueError("empty scn range")

    @property
    def key(self) -> str:
        return sstable_key(self.tablet_id, self.kind, self.start_scn, self.end_scn)

    @property
    def scn_range(self) -> tuple[Scn, Scn]:
        return self.start_scn, self.end_scn

    @property
    def block_keys(self) -> list[str]:
        return [m.key for m in self.macro_blocks]

    @property
    def size_bytes(self) -> int:
        return sum(m.size for m in self.macro_blocks)

    def candidate(self, key: bytes) -> MacroRef | None:
        firsts = [m.first_key for m in self.macro_blocks]
        i = bisect_right(firsts, key) - 1
        if i < 0:
            return None
        ref = self.macro_blocks[i]
        return ref if key <= ref.last_key else None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "tablet": self.tablet_id,
            "start": self.start_scn,
            "end": self.end_scn,
            "blocks": [m.to_dict() for m in self.macro_blocks],
            "checksum": self.checksum,
            "rows": self.row_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SsTable:
        return cls(
            SsTableKind(d["kind"]),
            d["tablet"],
            d["start"],
            d["end"],
            tuple(MacroRef.from_dict(b) for b in d["blocks"]),
            d["checksum"],
            d.get("rows", 0),
        )

    def manifest(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()


def sstable_key(tablet_id: int, kind: SsTableKind, start: Scn, end: Scn) -> str:
    return f"data/{tablet_id}/{SsTableKind(kind).value}/{start}-{end}"


def build_sstable(
    kind: SsTableKind,
    tablet_id: int,
    start_scn: Scn,
    end_scn: Scn,
    rows: Sequence[Row],
    sink: Callable[[str, bytes], object],
    micro_target: int = MICRO_TARGET,
    macro_target: int = MACRO_TARGET,
    reused: Sequence[MacroRef] = (),
    all_rows: Sequence[Row] | None = None,
) -> SsTable:
    """Pack ``rows`` into new macro-blocks written through ``sink``.

    ``reused`` blocks are spliced in by reference; new rows are packed in runs
    that never straddle a reused block's key range.  Block object keys are a
    pure function of the sstable coordinates, so retries overwrite identically.
    ``all_rows`` is the full logical content when blocks are reused.
    """
    base = sstable_key(tablet_id, kind, start_scn, end_scn)
    reused = sorted(reused, key=lambda r: r.first_key)
    runs: list[list[Row]] = [[] for _ in range(len(reused) + 1)]
    firsts = [r.first_key for r in reused]
    for row in rows:
        i = bisect_right(firsts, row.key)
        if i and row.key <= reused[i - 1].last_key:
            raise OverlappingRanges("new row falls inside a reused macro-block")
        runs[i].append(row)
    refs: list[MacroRef] = []
    seq = 0
    for run in runs:
        for micro in pack_rows(run, micro_target, macro_target):
            key = f"{base}/m{seq:05d}"
            seq += 1
            block = encode_macro_block(micro, block_id_for(key))
            sink(key, block.encoded)
            refs.append(
                MacroRef(
                    block.id,
                    key,
                    block.key_range[0],
                    block.key_range[1],
                    tuple(k for k, _ in block.block_index),
                    block.size_bytes,
                    block.content_hash,
                )
            )
    refs.extend(reused)
    refs.sort(key=lambda r: r.first_key)
    content = rows if all_rows is None else all_rows
    return SsTable(
        kind, tablet_id, start_scn, end_scn, tuple(refs), logical_checksum(content), len(content)
    )
