from __future__ import annotations

import pytest

from sharedlsm.errors import Deadlock
from sharedlsm.sim import FaultSpec, NodeSpec, Role, SimConfig, Simulation, default_roster, run_simulation


def small(**kw):
    return SimConfig(**{"seed": 1, "duration_ms": 1500, **kw})


def top(sim):
    return sim.rw.txm.scn.current


def test_replica_matches_writer_after_quiesce():
    sim = run_simulation(small())
    sim.quiesce()
    ro = sim.nodes["ro0"]
    assert ro.state_digest(top(sim)) == sim.rw.state_digest(top(sim))
    assert sim.check_acked() == [] and sim.check_acked(ro) == [] and sim.violations == []


def test_same_seed_same_run():
    a = run_simulation(small(seed=4))
    b = run_simulation(small(seed=4))
    assert a.trace_text() == b.trace_text() and a.metrics == b.metrics
    c = run_simulation(small(seed=5))
    assert c.trace_text() != a.trace_text()


def test_snapshot_runs_independently():
    sim = Simulation(small(seed=2))
    sim.run_until(700)
    fork = sim.snapshot_state()
    fork.run()
    sim.run()
    assert fork.trace_text() == sim.trace_text()


def test_step_on_empty_queue():
    sim = Simulation(small())
    sim.events.clear()
    assert sim.step() is False


def test_predicate_that_never_holds_deadlocks():
    sim = Simulation(small(duration_ms=50))
    with pytest.raises(Deadlock):
        sim.run_until(predicate=lambda s: False)


def test_predicate_stops_early():
    sim = Simulation(small())
    sim.run_until(predicate=lambda s: len(s.acked) >= 10)
    assert 10 <= len(sim.acked) <= 11 and sim.clock.now() < sim.config.duration_ms


def test_rw_crash_promotes_replica_and_loses_nothing():
    sim = run_simulation(small(duration_ms=4000, faults=[FaultSpec(1000, "rw0", "crash")]))
    assert sim.rw.name == "ro0"
    assert sim.check_acked() == [] and sim.violations == []
    assert any(",rs,promote," in line for line in sim.trace)


def test_restarted_node_keeps_local_cache_tier():
    sim = Simulation(small(duration_ms=3000, memtable_limit=2048))
    sim.run_until(1200)
    sim.quiesce()
    ro = sim.nodes["ro0"]
    for tid in ro.tablets:
        for k in range(sim.config.keys):
            ro.read(tid, b"key%08d" % k, top(sim))
    warm = set(ro.cache.local.arc.resident())
    sim.crash_node(ro)
    assert ro.cache.memory.residency() == 0
    sim.restart(ro)
    assert warm and warm <= set(ro.cache.local.arc.resident())
    sim.run()
    sim.quiesce()
    assert sim.check_acked(ro) == []


def test_ini_round_trip():
    cfg = small(faults=[FaultSpec(500.0, "log1", "partition", 200.0)], governor=True)
    back = SimConfig.from_ini(cfg.to_ini())
    assert back == cfg


@pytest.mark.parametrize(
    "text",
    ["[sim]\nbogus = 1\n", "[weird]\nx = 1\n", "[fault.0]\ntime = 1\ntarget = nobody\nkind = crash\n"],
)
def test_bad_ini_rejected(text):
    with pytest.raises(ValueError):
        SimConfig.from_ini(text)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(nodes=[NodeSpec("ro0", Role.RO)])
    with pytest.raises(ValueError):
        FaultSpec(1, "rw0", "meteor")
    assert [n.name for n in default_roster(azs=2) if n.role is Role.BLOCK_SERVER] == ["bs0", "bs1"]


def test_migration_reproduces_state():
    sim = Simulation(small(duration_ms=2000, memtable_limit=2048))
    sim.run_until(1500)
    sim.add_node("ro9")
    out = sim.migrate_replica("ro9", 1)
    sim.run()
    sim.quiesce()
    new = sim.nodes["ro9"]
    want = {tid: d for tid, d in sim.rw.state_digest(top(sim)).items() if tid in new.tablets}
    assert new.state_digest(top(sim)) == want
    assert out["attempts"] == 1 and out["total_bytes"] > 0


@pytest.mark.parametrize("step", [4, 5, 7])
def test_migration_survives_source_crash(step):
    sim = Simulation(small(duration_ms=2000, memtable_limit=2048, nodes=default_roster(ro=2)))
    sim.run_until(1500)
    sim.add_node("ro9")
    out = sim.migrate_replica("ro9", 1, crash_source_at=step)
    assert out["attempts"] == 2
    sim.run()
    sim.quiesce()
    assert sim.check_acked(sim.nodes["ro9"]) == []
