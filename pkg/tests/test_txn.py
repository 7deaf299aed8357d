from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from oracles import MultiVersionMap
from sharedlsm.clock import SimClock
from sharedlsm.core import Row
from sharedlsm.errors import SimulatedCrash, TxnAborted, WriteConflict
from sharedlsm.faults import CrashPoints
from sharedlsm.logservice import LogService
from sharedlsm.objstore import MemoryObjectStore, StoreConfig
from sharedlsm.txn import (
    ABORT,
    COMMIT,
    PREPARE,
    SINGLE,
    ClogRecord,
    LongTxnPolicy,
    TxnManager,
    decode_record,
    encode_record,
    recover_streams,
)

STREAMS = (1, 2, 3)


class Applied:
    """Applied rows as a multiversion map keyed by (tablet, key)."""

    def __init__(self):
        self.map = MultiVersionMap()
        self.rows: list[tuple[int, Row]] = []

    def __call__(self, tablet_id, row):
        self.rows.append((tablet_id, row))
        self.map.put(b"%d/" % tablet_id + row.key, None if row.tombstone else row.value, row.commit_scn)

    def read(self, tablet_id, key, scn):
        return self.map.get(b"%d/" % tablet_id + key, scn)


def world(crash=None, **kw):
    logs = LogService(MemoryObjectStore(StoreConfig(base_latency=0)))
    for ls in STREAMS:
        logs.create_stream(ls, 0)
    applied = Applied()
    tm = TxnManager(logs, lambda t: t, applied, applied.read, crash=crash, **kw)
    return tm, logs, applied


# -- CLog records --------------------------------------------------------------------


rec_st = st.builds(
    ClogRecord,
    st.sampled_from([PREPARE, COMMIT, ABORT, SINGLE]),
    st.integers(0, 2**64 - 1),
    st.lists(st.integers(0, 2**64 - 1), max_size=4).map(tuple),
    st.integers(0, 2**63),
    st.lists(
        st.tuples(st.integers(0, 2**32 - 1), st.builds(Row, st.binary(min_size=1, max_size=5), st.binary(max_size=5), st.integers(0, 99))),
        max_size=3,
    ).map(tuple),
)


@given(rec_st)
def test_record_round_trip(rec):
    assert decode_record(encode_record(rec)) == rec


def test_record_layout_prefix():
    buf = encode_record(ClogRecord(SINGLE, 7, (1,), 9))
    assert buf[:1] == b"\x04" and buf[1:9] == (7).to_bytes(8, "big") and buf[9:11] == b"\x00\x01"


def test_unknown_tag_rejected():
    with pytest.raises(ValueError):
        decode_record(b"\x09" + encode_record(ClogRecord(SINGLE, 1, (), 0))[1:])


# -- snapshot isolation --------------------------------------------------------------------


def test_reads_see_only_earlier_commits():
    tm, _, _ = world()
    w = tm.begin()
    tm.write(w, 1, b"k", b"1")
    tm.commit(w)
    r = tm.begin()
    w2 = tm.begin()
    tm.write(w2, 1, b"k", b"2")
    tm.commit(w2)
    assert tm.read_txn(r, 1, b"k") == b"1"
    assert tm.read_txn(tm.begin(), 1, b"k") == b"2"


def test_first_committer_wins():
    tm, _, _ = world()
    a, b = tm.begin(), tm.begin()
    tm.write(a, 1, b"k", b"a")
    tm.write(b, 1, b"k", b"b")
    tm.commit(a)
    with pytest.raises(WriteConflict):
        tm.commit(b)
    with pytest.raises(TxnAborted):
        tm.write(b, 1, b"x", b"y")


def test_delete_is_a_tombstone():
    tm, _, applied = world()
    t = tm.begin()
    tm.write(t, 1, b"k", b"v")
    s1 = tm.commit(t)
    t = tm.begin()
    tm.write(t, 1, b"k", delete=True)
    s2 = tm.commit(t)
    assert applied.read(1, b"k", s1) == b"v" and applied.read(1, b"k", s2) is None


def test_scns_increase_with_commit_order():
    tm, _, _ = world()
    scns = []
    for i in range(5):
        t = tm.begin()
        tm.write(t, 1 + i % 3, b"k%d" % i, b"v")
        scns.append(tm.commit(t))
    assert scns == sorted(scns) and len(set(scns)) == 5


def test_quorum_loss_aborts_single_stream():
    tm, logs, applied = world()
    logs.crash_replica(1, 1)
    logs.crash_replica(1, 2)
    t = tm.begin()
    tm.write(t, 1, b"k", b"v")
    with pytest.raises(TxnAborted):
        tm.commit(t)
    assert applied.rows == []


# -- two-phase commit ------------------------------------------------------------------------


def multi(tm, n):
    t = tm.begin()
    for ls in STREAMS[:n]:
        tm.write(t, ls, b"k", b"v%d" % ls)
    return t


def test_2pc_happy_path():
    tm, _, applied = world()
    scn = tm.commit(multi(tm, 3))
    assert [applied.read(ls, b"k", scn) for ls in STREAMS] == [b"v1", b"v2", b"v3"]


def test_2pc_participant_quorum_loss_aborts():
    tm, logs, applied = world()
    logs.crash_replica(2, 1)
    logs.crash_replica(2, 2)
    with pytest.raises(TxnAborted):
        tm.commit(multi(tm, 2))
    assert applied.rows == []
    fresh = Applied()
    _, outcomes, _ = recover_streams(logs, [1], fresh)
    assert fresh.rows == [] and set(outcomes.values()) <= {"aborted"}


def crash_points(n):
    cp = CrashPoints()
    tm, _, _ = world(cp)
    tm.commit(multi(tm, n))
    return cp.reached


@pytest.mark.parametrize("n", [2, 3])
def test_crash_points_enumerated(n):
    pts = crash_points(n)
    assert len(pts) == 2 * n + n  # before/after each prepare, coordinator commit, other commits
    assert "2pc.after_coordinator_commit" in pts


@pytest.mark.parametrize("n,point", [(n, p) for n in (2, 3) for p in crash_points(n)])
def test_2pc_crash_is_atomic(n, point):
    tm, logs, _ = world(CrashPoints(point))
    with pytest.raises(SimulatedCrash):
        tm.commit(multi(tm, n))
    fresh = Applied()
    reps, outcomes, _ = recover_streams(logs, STREAMS[:n], fresh)
    seen = {t for t, _ in fresh.rows}
    decided = point.startswith("2pc.after_commit") or point == "2pc.after_coordinator_commit"
    assert seen == (set(STREAMS[:n]) if decided else set())
    assert all(not r.pending for r in reps.values())
    scns = {row.commit_scn for _, row in fresh.rows}
    assert len(scns) <= 1
    # recovering again changes nothing
    again = Applied()
    _, second, _ = recover_streams(logs, STREAMS[:n], again)
    assert sorted(again.rows, key=repr) == sorted(fresh.rows, key=repr) and second == {}


def test_single_stream_crash_after_log_is_durable():
    tm, logs, applied = world(CrashPoints("single.after_clog"))
    t = tm.begin()
    tm.write(t, 2, b"k", b"v")
    with pytest.raises(SimulatedCrash):
        tm.commit(t)
    assert applied.rows == []
    fresh = Applied()
    recover_streams(logs, [2], fresh)
    assert [r.value for _, r in fresh.rows] == [b"v"]


# -- read-scn accounting and long transactions --------------------------------------------------


def test_min_read_scn_follows_oldest_active():
    tm, _, _ = world()
    for i in range(3):
        t = tm.begin()
        tm.write(t, 1, b"k%d" % i, b"v")
        tm.commit(t)
    old = tm.begin(node=1)
    t = tm.begin(node=2)
    tm.write(t, 1, b"z", b"v")
    tm.commit(t)
    assert tm.report_min_read_scn(1) == old.read_scn == 3
    assert tm.report_min_read_scn(2) == 4
    assert tm.aggregate_min_read_scn([1, 2]) == 3
    tm.abort(old)
    assert tm.aggregate_min_read_scn([1, 2]) == 4


def test_aggregate_never_regresses():
    tm, _, _ = world()
    t = tm.begin()
    tm.write(t, 1, b"k", b"v")
    tm.commit(t)
    assert tm.aggregate_min_read_scn([1]) == 1
    tm.scn.current = 0  # a stale view cannot pull it back
    assert tm.aggregate_min_read_scn([1]) == 1


def test_long_txn_abort_policy():
    clock = SimClock()
    tm, _, _ = world(clock=clock, timeout_ms=100)
    t = tm.begin()
    clock.advance(101)
    assert tm.handle_long_txns() == {t.txn_id: "aborted"}
    with pytest.raises(TxnAborted):
        tm.read_txn(t, 1, b"k")


def test_long_txn_promote_policy():
    clock = SimClock()
    tm, _, _ = world(clock=clock, timeout_ms=100, policy=LongTxnPolicy.PROMOTE)
    t = tm.begin()
    w = tm.begin()
    tm.write(w, 1, b"k", b"new")
    tm.commit(w)
    clock.advance(101)
    assert tm.handle_long_txns() == {t.txn_id: "promoted"}
    assert t.promoted and tm.read_txn(t, 1, b"k") == b"new"
