from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from oracles import bitwise_crc32, canonical_bytes
from sharedlsm.core import (
    MicroBlock,
    Row,
    SsTable,
    SsTableKind,
    build_sstable,
    crc32,
    decode_macro_block,
    encode_macro_block,
    logical_checksum,
    micro_slice,
    pack_rows,
    sort_rows,
    visible_rows,
)
from sharedlsm.errors import CorruptBlock, OverlappingRanges


def rows_of(*spec):
    return tuple(Row(k.encode(), v.encode(), s) for k, v, s in spec)


# -- crc --------------------------------------------------------------------


def test_crc_empty_is_zero():
    assert crc32(b"") == 0


def test_crc_check_value():
    # frozen from the bitwise oracle in tests/oracles.py
    assert bitwise_crc32(b"123456789") == 0xCBF43926
    assert crc32(b"123456789") == 0xCBF43926


@given(st.binary(max_size=200), st.binary(max_size=200))
def test_crc_streaming_equals_whole(a, b):
    assert crc32(b, crc32(a)) == crc32(a + b)


@given(st.binary(max_size=64))
def test_crc_matches_bitwise_oracle(data):
    assert crc32(data) == bitwise_crc32(data)


# -- rows and checksums -----------------------------------------------------------


def test_row_serialization_matches_canonical_layout():
    r = Row(b"key", b"value", 77, False)
    assert r.serialize() == canonical_bytes(b"key", b"value", 77, False)
    t = Row(b"k", b"", 5, True)
    assert t.serialize() == canonical_bytes(b"k", b"", 5, True)


def test_tombstone_needs_empty_value():
    with pytest.raises(ValueError):
        Row(b"k", b"v", 1, True)


def test_logical_checksum_empty():
    assert logical_checksum([]) == crc32(b"")


def test_logical_checksum_two_rows():
    rows = rows_of(("k1", "v1", 3), ("k2", "v2", 4))
    # frozen: bitwise CRC over the canonical serialization of both rows
    assert logical_checksum(rows) == 0x0E1DB78E


def test_checksum_is_packing_invariant():
    rows = sort_rows(Row(b"k%03d" % i, b"x" * (i % 7), i + 1) for i in range(200))
    one = build_sstable(SsTableKind.MINI, 1, 1, 200, rows, {}.__setitem__, 10**6, 10**7)
    many = build_sstable(SsTableKind.MINI, 1, 1, 200, rows, {}.__setitem__, 40, 100)
    assert len(one.macro_blocks) == 1 and len(many.macro_blocks) > 10
    assert one.checksum == many.checksum


row_st = st.builds(
    Row,
    st.binary(min_size=1, max_size=6),
    st.binary(max_size=8),
    st.integers(min_value=1, max_value=50),
)


@given(st.lists(row_st, max_size=40))
def test_sort_is_idempotent(rows):
    once = sort_rows(rows)
    assert sort_rows(once) == once


def test_visible_rows_picks_newest_and_hides_tombstones():
    rows = sort_rows([Row(b"a", b"1", 2), Row(b"a", b"2", 5), Row(b"b", b"", 4, True), Row(b"b", b"x", 1)])
    assert [(r.key, r.value) for r in visible_rows(rows, 4)] == [(b"a", b"1")]
    assert [(r.key, r.value) for r in visible_rows(rows, 3)] == [(b"a", b"1"), (b"b", b"x")]


# -- blocks -----------------------------------------------------------------------


def test_single_micro_round_trip():
    mb = MicroBlock(rows_of(("a", "1", 5)))
    macro = encode_macro_block([mb])
    assert len(macro.block_index) == 1
    assert decode_macro_block(macro.encoded).micro_blocks == (mb,)


def test_index_offsets_follow_serialization():
    m1 = MicroBlock(rows_of(("a", "1", 1), ("b", "1", 1), ("c", "1", 1)))
    m2 = MicroBlock(rows_of(("d", "1", 1), ("e", "1", 1), ("f", "1", 1)))
    macro = encode_macro_block([m1, m2])
    # each row is 4+1+4+1+8+1 = 19 bytes; a micro-block adds a 4-byte count
    assert macro.block_index == ((b"a", 0), (b"d", 61))
    assert micro_slice(macro.encoded, 1) == m2.serialize()


def test_overlapping_micro_blocks_rejected():
    m1 = MicroBlock(rows_of(("a", "1", 1), ("d", "1", 1)))
    m2 = MicroBlock(rows_of(("c", "1", 1), ("f", "1", 1)))
    with pytest.raises(OverlappingRanges):
        encode_macro_block([m1, m2])


def test_corrupt_block_detected():
    macro = encode_macro_block([MicroBlock(rows_of(("a", "1", 1)))])
    bad = bytearray(macro.encoded)
    bad[10] ^= 0xFF
    with pytest.raises(CorruptBlock):
        decode_macro_block(bytes(bad))
    with pytest.raises(CorruptBlock):
        decode_macro_block(b"XXXX" + macro.encoded[4:])


@settings(max_examples=60)
@given(st.lists(row_st, min_size=1, max_size=60), st.integers(30, 300))
def test_encode_decode_round_trip(rows, target):
    rows = sort_rows({(r.key, r.commit_scn): r for r in rows}.values())
    for micro in pack_rows(rows, target, target * 3):
        macro = encode_macro_block(micro)
        back = decode_macro_block(macro.encoded)
        assert back.micro_blocks == tuple(micro)
        assert back.encoded == macro.encoded
        firsts = [m.key_range[0] for m in micro]
        assert [k for k, _ in back.block_index] == firsts


@settings(max_examples=40)
@given(st.lists(row_st, min_size=1, max_size=80))
def test_sstable_packing_keeps_ranges_disjoint(rows):
    rows = sort_rows({(r.key, r.commit_scn): r for r in rows}.values())
    blobs = {}
    t = build_sstable(SsTableKind.MINOR, 3, 1, 60, rows, blobs.__setitem__, 50, 120)
    for a, b in zip(t.macro_blocks, t.macro_blocks[1:]):
        assert a.last_key < b.first_key
    back = [r for ref in t.macro_blocks for r in decode_macro_block(blobs[ref.key]).rows()]
    assert back == rows
    assert SsTable.from_dict(t.to_dict()) == t


def test_major_must_start_at_zero():
    with pytest.raises(ValueError):
        SsTable(SsTableKind.MAJOR, 1, 3, 9, (), 0)


def test_sstable_keys_are_hierarchical():
    t = build_sstable(SsTableKind.MINI, 7, 11, 20, rows_of(("a", "1", 12)), {}.__setitem__)
    assert t.key == "data/7/mini/11-20"
    assert t.block_keys == ["data/7/mini/11-20/m00000"]
