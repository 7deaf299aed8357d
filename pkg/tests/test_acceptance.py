"""Acceptance suite: one group of tests per criterion, named ``test_cNN_*``.

The conftest prints a PASS/FAIL line per criterion at the end of the run.
Each test also asserts its own wall-clock budget.
"""

from __future__ import annotations

import random
import time

import pytest

from harness import NODE, rig
from oracles import MultiVersionMap, ReferenceArc, bitwise_crc32, canonical_bytes
from sharedlsm.bench import PricingTable, collect_report, cost_savings, emit_csv, run_bench, storage_cost_compare
from sharedlsm.cache import ArcCache, CacheConfig, TieredCache, sync_access_sequence
from sharedlsm.core import Row, SsTableKind, build_sstable
from sharedlsm.errors import SimulatedCrash
from sharedlsm.faults import CrashPoints
from sharedlsm.gc import Referee
from sharedlsm.logservice import LogService
from sharedlsm.lsm import (
    CompactionReplica,
    DirectSource,
    EngineConfig,
    MajorCompaction,
    WorkerPool,
    offload_compaction,
)
from sharedlsm.objstore import MemoryObjectStore, StoreConfig
from sharedlsm.sim import FaultSpec, Role, SimConfig, Simulation, default_roster, run_simulation
from sharedlsm.txn import TxnManager, recover_streams
from sharedlsm.workload import WorkloadSpec


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


pytestmark = pytest.mark.acceptance


def top(sim):
    return sim.rw.txm.scn.current


# -- 1, 2: cost model --------------------------------------------------------------------


@pytest.mark.parametrize("p,want", [(0.10, 8.33), (0.20, 5.00), (0.50, 2.27)])
def test_c01_cost_savings(p, want):
    assert abs(cost_savings(0.8, p, 3) - want) <= 0.01


def test_c02_storage_cost_compare():
    assert storage_cost_compare(PricingTable(), "oltp").savings_pct == 59.0
    assert storage_cost_compare(PricingTable(), "olap").savings_pct == 89.0


# -- 3: crash and failover ---------------------------------------------------------------

CRASH_TARGETS = ["rw0", "log0", "log1", "log2", "gc"]


def test_c03_crash_failover_keeps_acked_commits():
    with Budget(120):
        failovers = {t: 0 for t in CRASH_TARGETS}
        for seed in range(200):
            rng = random.Random(seed)
            target = CRASH_TARGETS[seed % len(CRASH_TARGETS)]
            at = rng.uniform(200, 1000)
            cfg = SimConfig(
                seed=seed,
                duration_ms=2000,
                gc_lease_ms=400,
                gc_interval_ms=200,
                faults=[FaultSpec(at, target, "crash")],
            )
            sim = run_simulation(cfg)
            sim.quiesce()
            assert sim.violations == [], (seed, sim.violations)
            assert sim.check_acked() == [], (seed, target)
            for n in sim.compute_nodes():
                if n.alive and n.role is Role.RO:
                    assert sim.check_acked(n) == [], (seed, target, n.name)
            after = [line for line in sim.trace if float(line.split(",")[0]) > at]
            commits = sum(",commit," in line for line in after)
            if target == "rw0":
                ok = sim.rw.name != "rw0" and commits > 0
            elif target == "gc":
                downed = {line.split(",")[1] for line in after if ",down," in line}
                ok = not downed or any(",gc-lease," in line and line.split(",")[1] not in downed for line in after)
            else:
                ok = commits > 0
            failovers[target] += ok
        assert all(v == 40 for v in failovers.values()), failovers


# -- 4: reads at random snapshots against the multiversion oracle ----------------------------

KEYS = [b"k%02d" % i for i in range(40)]


def interleave(seed: int, n_ops: int) -> int:
    rng = random.Random(seed)
    t = rig(config=EngineConfig(memtable_limit=2048, micro_target=64, macro_target=256)).tablet
    oracle = MultiVersionMap()
    scn = 0
    checked = 0
    for i in range(n_ops):
        r = rng.random()
        if r < 0.45:
            scn += 1
            key = rng.choice(KEYS)
            if rng.random() < 0.1:
                t.write_row(Row(key, b"", scn, True))
                oracle.put(key, None, scn)
            else:
                value = rng.randbytes(rng.randrange(0, 12))
                t.write_row(Row(key, value, scn))
                oracle.put(key, value, scn)
        elif r < 0.9:
            if scn < t.floor:
                continue
            at = rng.randint(t.floor, scn)
            key = rng.choice(KEYS)
            assert t.read(key, at) == oracle.get(key, at), (seed, i, key, at)
            checked += 1
        else:
            action = rng.choice(["micro", "dump", "upload", "minor", "major"])
            if action == "micro":
                t.micro_compact()
            elif action == "dump":
                t.freeze()
                t.mini_compact()
            elif action == "upload":
                t.upload_increments()
            elif action == "minor":
                if sum(1 for x in t.tables.increments if x.key in t.uploaded) >= 2:
                    t.minor_compact()
            elif any(x.key in t.uploaded for x in t.tables.increments):
                t.major_compact(floor=max(t.floor, scn - rng.randrange(1, 200)))
        if i % 1000 == 999 and scn >= t.floor:
            at = rng.randint(t.floor, scn)
            assert [(x.key, x.value) for x in t.scan(None, None, at)] == oracle.scan(at), (seed, i, at)
    return checked


def test_c04_random_interleavings_match_oracle():
    with Budget(120):
        reads = sum(interleave(seed, 10_000) for seed in range(20))
        assert reads > 20 * 4000


# -- 5: write stalls with and without fast dumping ---------------------------------------------


def stall_config(fast: bool) -> SimConfig:
    return SimConfig(
        seed=7,
        duration_ms=5000,
        tablets=1,
        log_streams=1,
        txn_interval_ms=1,
        value_size=40,
        put_fraction=1.0,
        governor=True,
        fast_dump=fast,
        memtable_limit=32 * 1024,
        dump_bandwidth=80,
        bucket_ms=200,
        upload_interval_ms=1000,
    )


def test_c05_fast_dumping_removes_stalls():
    with Budget(60):
        fast, _ = run_bench(stall_config(True))
        slow, _ = run_bench(stall_config(False))
        assert fast.stall_windows == []
        assert len(slow.stall_windows) >= 1


# -- 6: ARC against the reference ----------------------------------------------------------------

CAPACITIES = (1, 4, 16, 64)


def arc_trace(rng: random.Random, c: int, n: int) -> list[int]:
    """Mix of a hot set, a warm range and one-off scans so every ARC case is hit."""
    out = []
    while len(out) < n:
        r = rng.random()
        if r < 0.5:
            out.append(rng.randrange(max(1, c // 2)))
        elif r < 0.9:
            out.append(rng.randrange(3 * c + 2))
        else:
            base = rng.randrange(10**6)
            out.extend(range(base, base + rng.randrange(1, c + 2)))
    return out[:n]


def test_c06_arc_matches_reference():
    with Budget(30):
        for i, c in [(i, c) for i in range(50) for c in CAPACITIES]:
            rng = random.Random(i)
            arc, ref = ArcCache(c), ReferenceArc(c)
            for x in arc_trace(rng, c, 10_000):
                assert arc.access(x) == ref.request(x), (i, c, x)
                arc.check()
            assert (list(arc.t1), list(arc.t2), list(arc.b1), list(arc.b2), arc.p) == (
                ref.T1,
                ref.T2,
                ref.B1,
                ref.B2,
                ref.p,
            )


# -- 7: cache warmth across passes and failover -----------------------------------------------


def cache_store(n_rows: int):
    store = MemoryObjectStore(StoreConfig(base_latency=0))
    rows = [Row(b"k%04d" % i, b"v" * 20, i + 1) for i in range(n_rows)]
    return store, build_sstable(SsTableKind.MINI, 1, 1, n_rows, rows, store.put, 64, 256)


def test_c07_second_pass_hits_memory_or_local():
    with Budget(60):
        store, table = cache_store(400)
        micros = [(ref, i) for ref in table.macro_blocks for i in range(len(ref.micro_keys))]
        c = TieredCache(1, store, config=CacheConfig(16, len(table.macro_blocks)))
        for ref, i in micros:
            c.micro(ref, i)
        c.log.served.clear()
        for ref, i in micros:
            c.micro(ref, i)
        assert c.log.ratio("memory", "local") == 1.0


def test_c07_new_leader_is_warm_after_sync():
    with Budget(60):
        store, table = cache_store(800)
        refs = table.macro_blocks
        for seed in range(10):
            rng = random.Random(seed)
            leader = TieredCache(1, store, config=CacheConfig(32, 16))
            follower = TieredCache(2, store, config=CacheConfig(32, 16))
            cold = TieredCache(3, store, config=CacheConfig(32, 16))
            for _ in range(2000):
                ref = refs[min(int(rng.expovariate(0.3)), len(refs) - 1)]
                leader.micro(ref, rng.randrange(len(ref.micro_keys)))
            hot = [(leader.refs[k[0]], k[1]) for k in leader.memory.arc.resident()]
            hot += [(leader.refs[k], i) for k in leader.local.arc.resident() for i in range(len(leader.refs[k].micro_keys))]
            sync_access_sequence(leader, [follower])
            # failover: the follower takes over and serves the old hot set
            for ref, i in hot:
                follower.micro(ref, i)
                cold.micro(ref, i)
            assert follower.log.ratio("memory", "local") >= 0.9, seed
            assert cold.log.ratio("memory", "local") < 0.9


# -- 8: GC safety under coordinator crashes ---------------------------------------------------

GC_POINTS = ["gc.after_intent", "gc.after_delete_0", "gc.after_delete_1", "gc.after_commit", None]


def test_c08_gc_safety_under_crashes():
    with Budget(120):
        deleted = 0
        crashed = 0
        for seed in range(200):
            rng = random.Random(1000 + seed)
            faults = []
            if rng.random() < 0.5:
                faults.append(FaultSpec(rng.uniform(1000, 3000), "gc", rng.choice(["crash", "partition"]), rng.uniform(0, 800)))
            cfg = SimConfig(
                seed=seed,
                duration_ms=4000,
                memtable_limit=2048,
                gc_lease_ms=rng.choice([600.0, 1000.0, 3000.0]),
                grace_ms=rng.choice([100.0, 500.0]),
                nodes=default_roster(ro=rng.choice([1, 2])),
                faults=faults,
            )
            sim = Simulation(cfg)
            sim.crash.arm(GC_POINTS[seed % len(GC_POINTS)])
            sim.run()
            sim.quiesce()
            for n in sim.compute_nodes():
                if n.alive and not n.partitioned:
                    assert sim.check_acked(n) == [], (seed, n.name)
            referee = Referee(sim.store)
            referee.check_lease_trace(sim.gc_trace)
            assert sim.violations == [] and referee.violations == [], (seed, sim.violations, referee.violations)
            deleted += len(sim.store.deleted)
            crashed += any(",crash," in line and "gc." in line for line in sim.trace)
        assert deleted > 0 and crashed >= 60, (deleted, crashed)


# -- 9: exhaustive 2PC crash points -------------------------------------------------------------

STREAMS = (1, 2, 3)


class Applied:
    def __init__(self):
        self.rows = []

    def __call__(self, tablet_id, row):
        self.rows.append((tablet_id, row))


def txn_world(crash):
    logs = LogService(MemoryObjectStore(StoreConfig(base_latency=0)))
    for ls in STREAMS:
        logs.create_stream(ls, 0)
    return TxnManager(logs, lambda t: t, Applied(), lambda *a: None, crash=crash), logs


def commit_multi(tm, n):
    t = tm.begin()
    for ls in STREAMS[:n]:
        tm.write(t, ls, b"k", b"v%d" % ls)
    return tm.commit(t)


def test_c09_2pc_crash_points_all_or_nothing():
    with Budget(30):
        for n in (2, 3):
            probe = CrashPoints()
            tm, _ = txn_world(probe)
            commit_multi(tm, n)
            assert len(probe.reached) == 3 * n
            outcomes = set()
            for point in probe.reached:
                tm, logs = txn_world(CrashPoints(point))
                with pytest.raises(SimulatedCrash):
                    commit_multi(tm, n)
                fresh = Applied()
                recover_streams(logs, STREAMS[:n], fresh)
                seen = {t for t, _ in fresh.rows}
                assert seen in (set(), set(STREAMS[:n])), (n, point, seen)
                assert len({r.commit_scn for _, r in fresh.rows}) <= 1
                outcomes.add(bool(seen))
            assert outcomes == {True, False}


# -- 10: major compaction ----------------------------------------------------------------------


def oracle_checksum(oracle: MultiVersionMap, scn: int) -> int:
    return bitwise_crc32(b"".join(canonical_bytes(k, v, s, False) for k, v, s in oracle.visible(scn)))


def random_tablet(seed: int):
    rng = random.Random(seed)
    r = rig()
    t = r.tablet
    oracle = MultiVersionMap()
    scn = 0
    for _ in range(rng.randint(2, 5)):
        for _ in range(rng.randint(5, 40)):
            scn += 1
            key = b"k%03d" % rng.randrange(60)
            if rng.random() < 0.15:
                t.write_row(Row(key, b"", scn, True))
                oracle.put(key, None, scn)
            else:
                value = rng.randbytes(rng.randrange(1, 16))
                t.write_row(Row(key, value, scn))
                oracle.put(key, value, scn)
        t.freeze()
        t.mini_compact()
    t.upload_increments()
    merge = rng.choice([x.end_scn for x in t.tables.increments])
    return r, oracle, merge, scn


class FlakySource(DirectSource):
    def __init__(self, store, bad):
        super().__init__(store)
        self.bad = bad

    def raw(self, ref):
        data = super().raw(ref)
        if self.bad > 0:
            self.bad -= 1
            return data[:-1] + bytes([data[-1] ^ 1])
        return data


def test_c10_major_compaction_checksums():
    with Budget(60):
        for seed in range(40):
            r, oracle, merge, last = random_tablet(seed)
            want = oracle_checksum(oracle, merge)
            assert r.tablet.read_state_checksum(merge) == want
            src = FlakySource(r.store, seed % 4)
            rep = CompactionReplica(2, src, refresh=lambda out, s=src: s._memo.clear())
            report = MajorCompaction(r.meta, r.store).run([1], NODE, 1, [rep], merge_scn={1: merge})
            assert report.phases == ["initiate", "schedule", "merge", "publish", "report", "verify", "complete"]
            assert report.retries[(1, 2)] == seed % 4 <= 3
            r.tablet.refresh()
            assert r.tablet.read_state_checksum(merge) == want == report.outputs[1].checksum
            assert r.tablet.read_state_checksum(last) == oracle_checksum(oracle, last)

            a, _, merge_a, _ = random_tablet(seed)
            b, _, _, _ = random_tablet(seed)
            in_place = a.tablet.major_compact(merge_scn=merge_a)
            off = offload_compaction(MajorCompaction(b.meta, b.store), WorkerPool({9}), [1], merge_scn={1: merge_a})
            assert off.outputs[1].checksum == in_place.checksum == want
            assert off.outputs[1].end_scn == in_place.end_scn == merge


# -- 11: replica migration --------------------------------------------------------------------


def test_c11_migration_state_and_economy():
    with Budget(60):
        ratios = []
        for seed in range(1, 9):
            rng = random.Random(seed)
            cfg = SimConfig(seed=seed, duration_ms=12000, keys=4000, memtable_limit=4096, governor=True)
            spec = WorkloadSpec(distribution="hotspot", keys=4000, hot_fraction=0.1, hot_weight=0.9)
            sim = Simulation(cfg, spec)
            sim.run_until(rng.uniform(6000, 11500))
            sim.add_node("ro9")
            out = sim.migrate_replica("ro9", 1)
            sim.run()
            sim.quiesce()
            new = sim.nodes["ro9"]
            want = {tid: d for tid, d in sim.rw.state_digest(top(sim)).items() if tid in new.tablets}
            assert new.state_digest(top(sim)) == want, seed
            assert sim.check_acked(new) == []
            ratios.append(out["node_to_node"] / out["total_bytes"])
        assert max(ratios) < 0.2, ratios


# -- 12: determinism -----------------------------------------------------------------------------


def test_c12_same_config_same_run():
    with Budget(60):
        cfg = SimConfig(
            seed=11,
            duration_ms=3000,
            memtable_limit=4096,
            governor=True,
            bucket_ms=250,
            nodes=default_roster(ro=2, azs=2),
            faults=[
                FaultSpec(800, "rw0", "crash", 600),
                FaultSpec(1200, "log1", "partition", 300),
                FaultSpec(1500, "ro1", "slow-disk", 500),
            ],
        )
        a = run_simulation(cfg)
        b = run_simulation(SimConfig.from_ini(cfg.to_ini()))
        assert a.trace_text() == b.trace_text()
        ra, rb = collect_report(a), collect_report(b)
        assert ra == rb and emit_csv(ra) == emit_csv(rb)
        assert len(a.trace) > 100
