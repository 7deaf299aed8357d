"""Deterministic discrete-event simulation of a shared-storage deployment.

Actors: read-write (RW) and read-only (RO) compute nodes, one BlockServer
per availability zone, a trio of LogServer replicas, and a root service that
handles failover.  Everything runs on one heap ordered by (time, insertion
sequence), and every random choice comes from one seeded generator, so a
:class:`SimConfig` fully determines the trace.

The RW/RO loop: the RW logs each commit to CLog; ROs pull and replay it; the
RW dumps and uploads SSTables, publishing each change as a metadata journal
record; ROs poll the journal and swap in the new SSTable lists; the metadata
service is snapshotted periodically for node bring-up.
"""

from __future__ import annotations

import configparser
import copy
import enum
import heapq
import logging
import random
from bisect import bisect_right
from dataclasses import dataclass, field, fields
from typing import Callable

from .cache import BlockServer, CacheConfig, TieredCache, VersionReader, warm_migration
from .clock import SECOND, SimClock
from .core import Row, Scn, logical_checksum
from .errors import (
    Deadlock,
    LeaseExpired,
    LeaseHeld,
    SimulatedCrash,
    StaleReports,
    Truncated,
    TxnAborted,
)
from .faults import CrashPoints
from .gc import GcConfig, GcCoordinator, NodeReport, join, report
from .logservice import EntryKind, LogService
from .lsm import DumpGovernor, EngineConfig, Tablet
from .metadata import MetadataService, MetaLevel, MetaReplica
from .objstore import MemoryObjectStore, StoreConfig
from .txn import ABORT, COMMIT, PREPARE, ClogReplayer, ScnAllocator, TxnManager, decode_record, resolve_in_doubt
from .workload import Op, WorkloadSpec, gen_workload, key_bytes

log = logging.getLogger(__name__)


class Role(str, enum.Enum):
    RW = "rw"
    RO = "ro"
    BLOCK_SERVER = "blockserver"
    LOG_SERVER = "logserver"
    STORAGE_WORKER = "worker"
    ROOT_SERVICE = "rootservice"


COMPUTE = (Role.RW, Role.RO)
BACKGROUND = frozenset({"replay", "report", "gc", "upload", "snapshot"})


@dataclass
class NodeSpec:
    name: str
    role: Role
    az: int = 0


@dataclass
class FaultSpec:
    time: float
    target: str
    kind: str  # crash, partition, slow-disk
    duration: float = 0.0

    def __post_init__(self):
        if self.kind not in ("crash", "partition", "slow-disk"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        self.time = float(self.time)
        self.duration = float(self.duration)


def default_roster(rw: int = 1, ro: int = 1, azs: int = 1) -> list[NodeSpec]:
    nodes = [NodeSpec(f"rw{i}", Role.RW, 0) for i in range(rw)]
    nodes += [NodeSpec(f"ro{i}", Role.RO, i % azs) for i in range(ro)]
    nodes += [NodeSpec(f"bs{a}", Role.BLOCK_SERVER, a) for a in range(azs)]
    nodes += [NodeSpec(f"log{i}", Role.LOG_SERVER, i % azs) for i in range(3)]
    nodes.append(NodeSpec("rs", Role.ROOT_SERVICE, 0))
    return nodes


@dataclass
class SimConfig:
    seed: int = 0
    duration_ms: float = 5 * SECOND
    tablets: int = 4
    log_streams: int = 2
    keys: int = 200
    value_size: int = 32
    put_fraction: float = 0.7
    multi_stream_fraction: float = 0.1
    txn_interval_ms: float = 5.0
    link_latency_ms: float = 1.0
    jitter_ms: float = 0.0
    replay_interval_ms: float = 20.0
    upload_interval_ms: float = 200.0
    snapshot_interval_ms: float = 1 * SECOND
    report_interval_ms: float = 500.0
    gc_interval_ms: float = 1 * SECOND
    detect_ms: float = 50.0
    memtable_limit: int = 16 * 1024
    dump_fill: float = 0.5
    micro_target: int = 1024
    macro_target: int = 8 * 1024
    minor_trigger: int = 4
    cache_memory_entries: int = 64
    cache_local_entries: int = 256
    dist_entries: int = 1024
    lease_ms: float = 2 * SECOND
    gc_lease_ms: float = 3 * SECOND
    grace_ms: float = 500.0
    governor: bool = False
    fast_dump: bool = True
    dump_bandwidth: float = 64.0
    bucket_ms: float = 1 * SECOND
    store_latency_ms: float = 100.0
    nodes: list[NodeSpec] = field(default_factory=default_roster)
    faults: list[FaultSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.tablets < 1 or self.log_streams < 1:
            raise ValueError("need at least one tablet and one log stream")
        if not any(n.role is Role.RW for n in self.nodes):
            raise ValueError("roster needs an RW node")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique")
        for f in self.faults:
            if f.target not in names and f.target != "gc":
                raise ValueError(f"fault targets unknown node {f.target!r}")
        # an INI round trip yields floats, so equal configs must hold floats too
        for f in fields(self):
            if f.type == "float":
                setattr(self, f.name, float(getattr(self, f.name)))

    @classmethod
    def from_ini(cls, text: str) -> SimConfig:
        """``[sim]`` scalars, ``[node.<name>]`` with role/az, ``[fault.<n>]``."""
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kw: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        if cp.has_section("sim"):
            for k, v in cp.items("sim"):
                if k not in types or k in ("nodes", "faults"):
                    raise ValueError(f"unknown sim key {k!r}")
                t = types[k]
                kw[k] = (v.lower() in ("1", "true", "yes")) if t == "bool" else float(v) if t == "float" else int(v)
        nodes = []
        faults = []
        for sec in cp.sections():
            if sec.startswith("node."):
                nodes.append(NodeSpec(sec[5:], Role(cp[sec].get("role")), cp[sec].getint("az", 0)))
            elif sec.startswith("fault."):
                s = cp[sec]
                faults.append(FaultSpec(s.getfloat("time"), s.get("target"), s.get("kind"), s.getfloat("duration", 0.0)))
            elif sec not in ("sim", "workload"):
                raise ValueError(f"unknown section [{sec}]")
        if nodes:
            kw["nodes"] = nodes
        kw["faults"] = sorted(faults, key=lambda f: (f.time, f.target))
        return cls(**kw)

    def to_ini(self) -> str:
        lines = ["[sim]"]
        for f in fields(self):
            if f.name in ("nodes", "faults"):
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        for n in self.nodes:
            lines += ["", f"[node.{n.name}]", f"role = {n.role.value}", f"az = {n.az}"]
        for i, fl in enumerate(self.faults):
            lines += ["", f"[fault.{i}]", f"time = {fl.time}", f"target = {fl.target}", f"kind = {fl.kind}", f"duration = {fl.duration}"]
        return "\n".join(lines) + "\n"


class LsnIndex:
    """Per-stream scn of every committed lsn, plus where 2PC prepares sit.

    Lets a node turn a checkpoint scn into the lsn it must replay from.
    """

    def __init__(self):
        self.scns: list[Scn] = []
        self.prepares: dict[int, int] = {}  # txn -> prepare lsn, while undecided
        self.spans: list[tuple[int, int]] = []  # (prepare lsn, decision lsn)

    def extend(self, entries) -> None:
        for e in entries:
            self.scns.append(e.scn)
            if e.kind is not EntryKind.CLOG:
                continue
            rec = decode_record(e.payload)
            if rec.tag == PREPARE:
                self.prepares[rec.txn_id] = e.lsn
            elif rec.tag in (COMMIT, ABORT) and rec.txn_id in self.prepares:
                self.spans.append((self.prepares.pop(rec.txn_id), e.lsn))

    def replay_from(self, checkpoint: Scn) -> int:
        lsn = bisect_right(self.scns, checkpoint)
        for p, d in self.spans:
            if p < lsn <= d:
                lsn = p
        for p in self.prepares.values():
            lsn = min(lsn, p) if p < lsn else lsn
        return lsn


class SimNode:
    def __init__(self, sim: Simulation, spec: NodeSpec, node_id: int):
        self.sim = sim
        self.name = spec.name
        self.role = spec.role
        self.az = spec.az
        self.node_id = node_id
        self.alive = True
        self.partitioned = False
        self.slow = False
        self.local_disk: dict[str, bytes] = {}
        self.tablets: dict[int, Tablet] = {}
        self.replayers: dict[int, ClogReplayer] = {}
        self.governors: dict[int, DumpGovernor] = {}
        self.txm: TxnManager | None = None
        self.replica = MetaReplica(sim.meta)
        self.cache: TieredCache | None = None
        if self.role in COMPUTE:
            self.cache = self._new_cache()

    def _new_cache(self) -> TieredCache:
        cfg = self.sim.config
        return TieredCache(
            self.node_id,
            self.sim.store,
            config=CacheConfig(cfg.cache_memory_entries, cfg.cache_local_entries),
            block_server=self.sim.block_servers.get(self.az),
            local_files=self.local_disk,
            version_of=VersionReader(self.replica),
            observer=self.sim.observe,
        )

    # -- tablets ----------------------------------------------------------
    def make_tablet(self, tid: int, writer: bool) -> Tablet:
        sim = self.sim
        cfg = sim.engine_config if writer else sim.replica_config
        return Tablet(
            tid,
            sim.store,
            log_stream_id=sim.stream_of(tid),
            local=self.local_disk,
            source=self.cache,
            config=cfg,
            meta=sim.meta if writer else None,
            node_id=self.node_id,
        )

    def stream_of(self, tid: int) -> int:
        return self.sim.stream_of(tid)

    def rw_apply(self, tid: int, row: Row) -> None:
        self.tablets[tid].write_row(row)

    def replay_apply(self, tid: int, row: Row) -> None:
        t = self.tablets.get(tid)
        if t is not None:
            t.replay([row])

    def read(self, tid: int, key: bytes, scn: Scn) -> bytes | None:
        return self.tablets[tid].read(key, scn)

    def adopt_metadata(self) -> None:
        for tid, t in self.tablets.items():
            payload = self.replica.view.meta(MetaLevel.TABLET, tid)
            if payload is None:
                continue
            t.apply_meta(payload["payload"])
            end = t.tables.increments[-1].end_scn if t.tables.increments else (
                t.tables.major.end_scn if t.tables.major else 0
            )
            if end > t.checkpoint:
                t.active.take_upto(end)
                t.checkpoint = end

    def replayed_scn(self) -> Scn:
        if self.role is Role.RW and self.txm is not None:
            return self.txm.scn.current
        if not self.replayers:
            return 0
        return min(r.max_scn for r in self.replayers.values())

    def min_checkpoint(self, ls: int) -> Scn:
        cps = [t.checkpoint for t in self.tablets.values() if t.log_stream_id == ls]
        return min(cps) if cps else 0

    def state_digest(self, scn: Scn) -> dict[int, int]:
        return {tid: logical_checksum(t.scan(None, None, scn)) for tid, t in sorted(self.tablets.items())}


@dataclass
class Metrics:
    ops: list[int] = field(default_factory=list)
    served: list[dict[str, int]] = field(default_factory=list)
    stalls: list[int] = field(default_factory=list)
    compactions: dict[str, int] = field(default_factory=dict)
    bytes_to_store: int = 0
    bytes_from_store: int = 0


class Simulation:
    def __init__(self, config: SimConfig, workload: WorkloadSpec | None = None):
        self.config = config
        self.rng = random.Random(config.seed)
        self.clock = SimClock()
        self.store = MemoryObjectStore(StoreConfig(base_latency=config.store_latency_ms))
        self.logs = LogService(self.store, seed=config.seed)
        self.meta = MetadataService(self.logs, self.store, self.clock, lease_ms=config.lease_ms)
        self.crash = CrashPoints()
        self.events: list[tuple[float, int, str, str, object]] = []
        self._seq = 0
        self.trace: list[str] = []
        self.violations: list[str] = []
        self.acked: list[tuple[int, bytes, bytes | None, Scn]] = []
        self.gc_trace: list = []
        self.engine_config = EngineConfig(
            memtable_limit=config.memtable_limit,
            micro_target=config.micro_target,
            macro_target=config.macro_target,
            minor_trigger=config.minor_trigger,
        )
        self.replica_config = EngineConfig(
            memtable_limit=1 << 40, micro_target=config.micro_target, macro_target=config.macro_target
        )
        self.block_servers: dict[int, BlockServer] = {}
        for i, spec in enumerate(config.nodes):
            if spec.role is Role.BLOCK_SERVER:
                self.block_servers[spec.az] = BlockServer(config.dist_entries, server_id=i)
        self.nodes: dict[str, SimNode] = {}
        for i, spec in enumerate(config.nodes):
            self.nodes[spec.name] = SimNode(self, spec, i + 1)
        self.index: dict[int, LsnIndex] = {}
        self.workload = workload or WorkloadSpec(
            keys=config.keys,
            ops=10**9,
            put_fraction=config.put_fraction,
            get_fraction=1 - config.put_fraction,
            value_size=config.value_size,
        )
        self._ops = OpStream(self.workload, config.seed)
        self.queue: list[Op] = []
        self.metrics = Metrics()
        self._bucket = {"ops": 0, "waiting": False}
        self.gcs: dict[tuple[str, int], GcCoordinator] = {}
        self._bootstrap()

    # -- plumbing -----------------------------------------------------------
    def stream_of(self, tid: int) -> int:
        return 1 + tid % self.config.log_streams

    @property
    def streams(self) -> list[int]:
        return list(range(1, self.config.log_streams + 1))

    def node_by_id(self, node_id: int) -> SimNode:
        return next(n for n in self.nodes.values() if n.node_id == node_id)

    @property
    def rw(self) -> SimNode:
        return next(n for n in self.nodes.values() if n.role is Role.RW and n.alive)

    def compute_nodes(self) -> list[SimNode]:
        return [n for n in self.nodes.values() if n.role in COMPUTE]

    def emit(self, actor: str, kind: str, detail: str = "") -> None:
        self.trace.append(f"{self.clock.now():.3f},{actor},{kind},{detail}")

    def schedule(self, delay: float, actor: str, kind: str, payload: object = None) -> None:
        # background loops end with the run so a drained queue means quiescence
        if kind in BACKGROUND and self.clock.now() + delay > self.config.duration_ms:
            return
        jitter = self.rng.random() * self.config.jitter_ms if self.config.jitter_ms else 0.0
        heapq.heappush(self.events, (self.clock.now() + delay + jitter, self._seq, actor, kind, payload))
        self._seq += 1

    def observe(self, key: str) -> None:
        if key in self.store.deleted and not self.store.exists(key):
            self.violations.append(f"{self.clock.now():.3f}: read touched deleted object {key}")

    def _bootstrap(self) -> None:
        rw = next(n for n in self.nodes.values() if n.role is Role.RW)
        for ls in self.streams:
            self.logs.create_stream(ls, rw.node_id)
            self.index[ls] = LsnIndex()
        for n in self.compute_nodes():
            writer = n is rw
            for tid in range(self.config.tablets):
                n.tablets[tid] = n.make_tablet(tid, writer)
            join(self.meta, n.node_id)
            if not writer:
                for ls in self.streams:
                    n.replayers[ls] = ClogReplayer(self.logs, ls, n.replay_apply)
        self._make_writer(rw, ScnAllocator())
        for ls in self.streams:
            self.meta.acquire_sswriter(ls, rw.node_id)
        for n in self.compute_nodes():
            if n is not rw:
                self.schedule(self.config.replay_interval_ms, n.name, "replay")
            self.schedule(self.config.report_interval_ms, n.name, "report")
            # replicas bid for the GC lease first so it lands off the RW
            self.schedule(self.config.gc_interval_ms * (1.5 if n is rw else 1.0), n.name, "gc")
        self.schedule(self.config.snapshot_interval_ms, rw.name, "snapshot")
        self.schedule(0, "rs", "bucket")
        for f in self.config.faults:
            heapq.heappush(self.events, (f.time, self._seq, f.target, "fault", f))
            self._seq += 1
        self.emit("sim", "start", f"seed={self.config.seed}")

    def _make_writer(self, node: SimNode, scn: ScnAllocator) -> None:
        node.role = Role.RW
        node.txm = TxnManager(
            self.logs, node.stream_of, node.rw_apply, node.read, clock=self.clock, scn=scn
        )
        if self.config.governor:
            node.governors = {
                tid: DumpGovernor(t, self.config.dump_bandwidth, self.config.fast_dump)
                for tid, t in node.tablets.items()
            }
        self.schedule(self.config.txn_interval_ms, node.name, "txn")
        self.schedule(self.config.upload_interval_ms, node.name, "upload")

    # -- event loop ----------------------------------------------------------
    def step(self) -> bool:
        if not self.events:
            return False
        t, _, actor, kind, payload = heapq.heappop(self.events)
        self.clock.advance_to(t)
        self._update_index()
        handler = getattr(self, f"_on_{kind.replace('-', '_')}")
        handler(actor, payload)
        return True

    def run_until(self, time: float | None = None, predicate: Callable[[Simulation], bool] | None = None) -> list[str]:
        end = self.config.duration_ms if time is None and predicate is None else time
        while True:
            if predicate is not None and predicate(self):
                break
            if not self.events:
                if predicate is not None:
                    raise Deadlock("event queue empty and predicate unmet")
                break
            if end is not None and self.events[0][0] > end:
                self.clock.advance_to(end)
                break
            self.step()
        return self.trace

    def run(self) -> list[str]:
        return self.run_until(self.config.duration_ms)

    def snapshot_state(self) -> Simulation:
        """A deep, independent copy; running it never touches this one."""
        return copy.deepcopy(self)

    def _update_index(self) -> None:
        for ls, idx in self.index.items():
            end = self.logs.committed_end(ls)
            if len(idx.scns) < end:
                idx.extend(self.logs.read_iter(ls, len(idx.scns)))

    # -- RW work -------------------------------------------------------------
    def _live_writer(self, actor: str) -> SimNode | None:
        node = self.nodes[actor]
        if not node.alive or node.role is not Role.RW or node.txm is None:
            return None
        return node

    def _on_txn(self, actor: str, _payload) -> None:
        node = self._live_writer(actor)
        if node is None:
            return
        if self.clock.now() < self.config.duration_ms:
            self.queue.append(next(self._ops))
        done = 0
        while self.queue:
            op = self.queue[0]
            if not self._run_op(node, op):
                break
            self.queue.pop(0)
            done += 1
        self._bucket["ops"] += done
        self._bucket["waiting"] = self._bucket["waiting"] or bool(self.queue)
        if self.clock.now() < self.config.duration_ms or self.queue:
            self.schedule(self.config.txn_interval_ms, actor, "txn")

    def _run_op(self, node: SimNode, op: Op) -> bool:
        txm = node.txm
        tid = op.key % self.config.tablets
        key = key_bytes(op.key)
        if op.kind == "get":
            txn = txm.begin(node.node_id)
            txm.read_txn(txn, tid, key)
            txm.commit(txn)
            return True
        targets = [(tid, key, op.value)]
        if self.config.log_streams > 1 and self.rng.random() < self.config.multi_stream_fraction:
            other = (tid + 1) % self.config.tablets
            if self.stream_of(other) != self.stream_of(tid):
                targets.append((other, key, op.value))
        if node.governors:
            for t, k, v in targets:
                if not node.governors[t].admit(17 + len(k) + len(v), self.clock.now()):
                    return False
        txn = txm.begin(node.node_id)
        for t, k, v in targets:
            txm.write(txn, t, k, v)
        try:
            scn = txm.commit(txn)
        except TxnAborted as exc:
            self.emit(node.name, "abort", str(exc).replace(",", ";"))
            return True
        for t, k, v in targets:
            self.acked.append((t, k, v, scn))
        self.emit(node.name, "commit", f"scn={scn} tablets={'+'.join(str(t) for t, _, _ in targets)}")
        return True

    def _on_upload(self, actor: str, _payload) -> None:
        node = self._live_writer(actor)
        if node is None:
            return
        cfg = self.config
        for tid, t in sorted(node.tablets.items()):
            if not node.governors and t.active.size >= cfg.dump_fill * cfg.memtable_limit:
                t.freeze()
                if t.mini_compact() is not None:
                    self._count("mini")
            ls = t.log_stream_id
            if not self.meta.verify(ls, node.node_id):
                continue
            try:
                keys = t.upload_increments()
                if keys:
                    self.emit(node.name, "upload", f"tablet={tid} objects={len(keys)}")
                out = t.maybe_compact()
                if out is not None:
                    self._count(out.kind.value)
                    self.emit(node.name, "compact", f"tablet={tid} kind={out.kind.value} end={out.end_scn}")
            except LeaseExpired:
                continue
            self._share_increments(node, t)
        for ls in self.streams:
            if self.meta.verify(ls, node.node_id):
                self.meta.renew_sswriter(ls, node.node_id)
        self.schedule(cfg.upload_interval_ms, actor, "upload")

    def _share_increments(self, node: SimNode, t: Tablet) -> None:
        """Dumped increments in shared storage are also served by the zone's block server."""
        bs = self.block_servers.get(node.az)
        if bs is None or not bs.up:
            return
        for tbl in t.tables.increments:
            if tbl.key not in t.uploaded:
                continue
            for k in tbl.block_keys:
                version = node.cache.version_of(k)
                if not bs.holds(k, version):
                    bs.put(k, version, node.local_disk.get(k) or self.store.get(k))

    def _count(self, kind: str) -> None:
        self.metrics.compactions[kind] = self.metrics.compactions.get(kind, 0) + 1

    def _on_snapshot(self, actor: str, _payload) -> None:
        node = self._live_writer(actor)
        if node is None:
            return
        key = self.meta.snapshot()
        self.emit(actor, "meta-snapshot", key)
        self.schedule(self.config.snapshot_interval_ms, actor, "snapshot")

    def _on_acquire(self, actor: str, ls) -> None:
        node = self._live_writer(actor)
        if node is None:
            return
        try:
            self.meta.acquire_sswriter(ls, node.node_id)
            self.emit(actor, "sswriter", f"ls={ls}")
        except LeaseHeld:
            self.schedule(self.config.lease_ms / 4, actor, "acquire", ls)

    # -- RO work -------------------------------------------------------------
    def _on_replay(self, actor: str, _payload) -> None:
        node = self.nodes[actor]
        if not node.alive or node.role is not Role.RO:
            return
        if not node.partitioned:
            self._replay(node)
        self.schedule(self.config.replay_interval_ms, actor, "replay")

    def _replay(self, node: SimNode) -> None:
        n = 0
        for ls, r in sorted(node.replayers.items()):
            try:
                n += r.poll()
            except Truncated as exc:
                self.violations.append(f"{self.clock.now():.3f}: {node.name} replay hit reclaimed log: {exc}")
        node.replica.poll()
        node.adopt_metadata()
        if n:
            self.emit(node.name, "replay", f"entries={n}")

    # -- reporting and GC ----------------------------------------------------
    def replay_lsn(self, node: SimNode, ls: int) -> int:
        need = self.index[ls].replay_from(node.min_checkpoint(ls))
        r = node.replayers.get(ls)
        if r is not None and node.role is Role.RO:
            need = min(need, r.replayed_lsn)
        return need

    def _on_report(self, actor: str, _payload) -> None:
        node = self.nodes[actor]
        if not node.alive:
            return
        if not node.partitioned:
            meta_lsn = self.meta.view.applied_lsn if node.role is Role.RW else node.replica.view.applied_lsn
            if node.role is Role.RW:
                min_read = node.txm.report_min_read_scn(node.node_id)
            else:
                min_read = node.replayed_scn()
            for ls in self.streams:
                report(
                    self.meta,
                    ls,
                    NodeReport(node.node_id, min_read, self.replay_lsn(node, ls), meta_lsn, self.clock.now()),
                )
        self.schedule(self.config.report_interval_ms, actor, "report")

    def gc_for(self, node: SimNode, ls: int) -> GcCoordinator:
        key = (node.name, ls)
        if key not in self.gcs:
            self.gcs[key] = GcCoordinator(
                node.node_id,
                ls,
                self.meta,
                self.store,
                self.logs,
                self.clock,
                GcConfig(lease_ms=self.config.gc_lease_ms, grace_ms=self.config.grace_ms,
                         report_interval_ms=self.config.report_interval_ms),
                crash=self.crash,
                trace=self.gc_trace,
            )
            self.gcs[key].blocking = False
        return self.gcs[key]

    def _on_gc(self, actor: str, _payload) -> None:
        node = self.nodes[actor]
        if not node.alive:
            return
        self.schedule(self.config.gc_interval_ms, actor, "gc")
        for ls in self.streams:
            gc = self.gc_for(node, ls)
            gc.partitioned = node.partitioned
            try:
                if not gc.holds():
                    if node.partitioned:
                        continue
                    gc.elect()
                    self.emit(actor, "gc-lease", f"ls={ls}")
                elif not gc.renew():
                    continue
                end = self.logs.committed_end(ls)
                if end > self.logs.relocated_end(ls):
                    self.logs.relocate(ls, end - 1)
                deleted = gc.run_round()
                bound = gc.reclaim_clog()
                if deleted:
                    self.emit(actor, "gc-delete", f"ls={ls} objects={deleted}")
                self.emit(actor, "gc-round", f"ls={ls} reclaim={bound}")
            except (LeaseHeld, LeaseExpired, StaleReports):
                continue
            except SimulatedCrash as exc:
                self.emit(actor, "crash", f"at={exc}")
                self.crash_node(node)
                return

    # -- metrics ------------------------------------------------------------
    def _on_bucket(self, actor: str, _payload) -> None:
        now = self.clock.now()
        if now > 0:
            self.metrics.ops.append(self._bucket["ops"])
            self.metrics.stalls.append(1 if self._bucket["ops"] == 0 and self._bucket["waiting"] else 0)
            served = {"memory": 0, "local": 0, "dist": 0, "store": 0}
            for n in self.compute_nodes():
                if n.cache is None:
                    continue
                for s in n.cache.log.served:
                    served[s] += 1
                n.cache.log.served.clear()
            self.metrics.served.append(served)
        self._bucket = {"ops": 0, "waiting": bool(self.queue)}
        if now < self.config.duration_ms:
            self.schedule(self.config.bucket_ms, actor, "bucket")

    # -- faults ---------------------------------------------------------------
    def _on_fault(self, actor: str, f: FaultSpec) -> None:
        self.emit(f.target, f"fault-{f.kind}", f"duration={f.duration}")
        target = self.gc_holder_name() if f.target == "gc" else f.target
        if target is None:
            return
        node = self.nodes[target]
        if f.kind == "crash":
            if node.role is Role.LOG_SERVER:
                self.crash_log_server(node)
            else:
                self.crash_node(node)
            if f.duration:
                self.schedule(f.duration, target, "restart")
        elif f.kind == "partition":
            if node.role is Role.LOG_SERVER:
                rid = self.log_replica_id(node)
                for ls in [0] + self.streams:
                    self.logs.partition_replica(ls, rid, False)
                    self._maybe_log_failover(ls, rid)
            node.partitioned = True
            if f.duration:
                self.schedule(f.duration, target, "heal")
        elif f.kind == "slow-disk":
            node.slow = True
            if node.cache is not None:
                node.cache.local.latency_ms *= 10
            if f.duration:
                self.schedule(f.duration, target, "heal")

    def gc_holder_name(self) -> str | None:
        for ls in self.streams:
            h = self.meta.lease_holder(ls, kind="gc")
            if h is not None:
                return self.node_by_id(h).name
        return None

    def log_replica_id(self, node: SimNode) -> int:
        return sorted(n.name for n in self.nodes.values() if n.role is Role.LOG_SERVER).index(node.name)

    def _maybe_log_failover(self, ls: int, rid: int) -> None:
        s = self.logs.stream(ls)
        if s.leader == rid:
            self.logs.leader_failover(ls)
            self.emit("log", "leader-failover", f"ls={ls} leader={s.leader}")

    def crash_log_server(self, node: SimNode) -> None:
        node.alive = False
        rid = self.log_replica_id(node)
        for ls in [0] + self.streams:
            self.logs.crash_replica(ls, rid)
            self._maybe_log_failover(ls, rid)

    def crash_node(self, node: SimNode) -> None:
        """Drop volatile state; local disk and the local cache tier survive."""
        if not node.alive:
            return
        node.alive = False
        was_rw = node.role is Role.RW
        node.txm = None
        node.governors = {}
        if node.cache is not None:
            node.cache.memory = type(node.cache.memory)("memory", self.config.cache_memory_entries,
                                                        node.cache.memory.latency_ms)
        self.emit(node.name, "down", "rw" if was_rw else node.role.value)
        if was_rw:
            self.schedule(self.config.detect_ms, "rs", "promote", node.name)

    def _on_heal(self, actor: str, _payload) -> None:
        node = self.nodes[actor]
        node.partitioned = False
        if node.slow and node.cache is not None:
            node.cache.local.latency_ms /= 10
        node.slow = False
        if node.role is Role.LOG_SERVER:
            rid = self.log_replica_id(node)
            for ls in [0] + self.streams:
                self.logs.partition_replica(ls, rid, True)
                self.logs.revive_replica(ls, rid)
        self.emit(actor, "heal")

    def _on_promote(self, actor: str, old_name: str) -> None:
        """Root service: promote the most caught-up RO to RW."""
        standbys = [n for n in self.compute_nodes() if n.alive and n.role is Role.RO and not n.partitioned]
        if not standbys:
            self.emit("rs", "promote-wait", old_name)
            return
        for n in standbys:
            self._replay(n)
        new = max(standbys, key=lambda n: (sum(r.replayed_lsn for r in n.replayers.values()), -n.node_id))
        self.promote(new)

    def promote(self, node: SimNode) -> None:
        for ls in self.streams:
            self.logs.set_owner(ls, node.node_id)
        for r in node.replayers.values():
            r.poll()
        resolve_in_doubt(self.logs, node.replayers)
        top = max([r.max_scn for r in node.replayers.values()] + [0])
        node.replica.poll()
        node.adopt_metadata()
        for t in node.tablets.values():
            t.meta = self.meta
            t.node_id = node.node_id
            t.config = self.engine_config
            t.active.limit = self.engine_config.memtable_limit
            t.uploaded = {x.key for x in t.tables.increments}
        self._make_writer(node, ScnAllocator(top))
        node.replayers = {}
        self.schedule(self.config.txn_interval_ms, node.name, "snapshot")
        for ls in self.streams:
            self.schedule(0, node.name, "acquire", ls)
        self.emit("rs", "promote", f"{node.name} scn={top}")

    def _on_restart(self, actor: str, _payload) -> None:
        node = self.nodes[actor]
        if node.role is Role.LOG_SERVER:
            node.alive = True
            rid = self.log_replica_id(node)
            for ls in [0] + self.streams:
                self.logs.revive_replica(ls, rid)
            self.emit(actor, "up")
            return
        if node.alive:
            return
        self.restart(node)

    def restart(self, node: SimNode) -> None:
        """Bring a crashed compute node back as an RO replica.

        Tablets restart from the shared checkpoint and replay CLog from the
        lsn that checkpoint maps to; the Local cache tier is still warm.
        """
        node.alive = True
        node.role = Role.RO
        node.replica = MetaReplica(self.meta)
        node.cache.version_of = VersionReader(node.replica)
        for key in [k for k in node.local_disk if k.startswith("private/") or k.startswith("data/")]:
            del node.local_disk[key]
        node.tablets = {tid: node.make_tablet(tid, False) for tid in range(self.config.tablets)}
        node.replica.poll()
        node.adopt_metadata()
        node.replayers = {}
        for ls in self.streams:
            start = self.index[ls].replay_from(node.min_checkpoint(ls))
            node.replayers[ls] = ClogReplayer(self.logs, ls, node.replay_apply, start)
        self._replay(node)
        self.schedule(self.config.replay_interval_ms, node.name, "replay")
        self.schedule(self.config.report_interval_ms, node.name, "report")
        self.schedule(self.config.gc_interval_ms, node.name, "gc")
        self.emit(node.name, "up", "ro")

    # -- migration ------------------------------------------------------------
    def add_node(self, name: str, role: Role = Role.RO, az: int = 0) -> SimNode:
        spec = NodeSpec(name, role, az)
        node = SimNode(self, spec, max(n.node_id for n in self.nodes.values()) + 1)
        node.alive = False
        self.nodes[name] = node
        return node

    def migrate_replica(self, target: str, log_stream_id: int, *, crash_source_at: int | None = None) -> dict:
        """Bring ``target`` up as a replica of one log stream's tablets."""
        ls = log_stream_id
        tnode = self.nodes[target]
        tids = [tid for tid in range(self.config.tablets) if self.stream_of(tid) == ls]
        self.emit(target, "migrate-1", f"ls={ls} create stream shell")
        attempts = 0
        while True:
            attempts += 1
            candidates = [
                n for n in self.compute_nodes() if n.alive and n is not tnode and not n.partitioned
            ]
            source = max(candidates, key=lambda n: (self._replayed_lsn(n, ls), -n.node_id))
            self.emit(target, "migrate-2", f"source={source.name}")
            self.emit(target, "migrate-3", f"offline; end={self.logs.committed_end(ls)} term={self.logs.stream(ls).term}")
            tnode.replica = MetaReplica(self.meta)
            tnode.cache.version_of = VersionReader(tnode.replica)
            tnode.replica.poll()
            tnode.tablets = {tid: tnode.make_tablet(tid, False) for tid in tids}
            tnode.adopt_metadata()
            self.emit(target, "migrate-4", f"shells={len(tids)}")
            if crash_source_at == 4 and attempts == 1:
                self.crash_node(source)
                continue
            private = 0
            for tid in tids:
                st = source.tablets[tid]
                for tbl in st.tables.increments:
                    if tbl.key in st.uploaded:
                        continue
                    for k in [tbl.key] + tbl.block_keys:
                        data = source.local_disk[k]
                        tnode.local_disk[k] = data
                        private += len(data)
                    tnode.tablets[tid].tables.increments.append(tbl)
                    tnode.tablets[tid].checkpoint = max(tnode.tablets[tid].checkpoint, tbl.end_scn)
                tnode.tablets[tid].tables.validate()
            self.emit(target, "migrate-5", f"private_bytes={private}")
            if crash_source_at == 5 and attempts == 1:
                self.crash_node(source)
                continue
            start = self.index[ls].replay_from(tnode.min_checkpoint(ls))
            tnode.replayers = {ls: ClogReplayer(self.logs, ls, tnode.replay_apply, start)}
            tnode.alive = True
            self.emit(target, "migrate-6", f"online replay_from={start}")
            baseline = [t.tables.major.block_keys for t in tnode.tablets.values() if t.tables.major]
            live = [
                k
                for t in tnode.tablets.values()
                for tbl in ([t.tables.major] if t.tables.major else []) + t.tables.increments
                for k in tbl.block_keys
            ]
            copied = warm_migration(source.cache, tnode.cache, [k for ks in baseline for k in ks], live)
            self.emit(
                target,
                "migrate-7",
                f"node={copied.node_to_node} dist={copied.from_distributed} store={copied.from_store}",
            )
            if crash_source_at == 7 and attempts == 1:
                self.crash_node(source)
                continue
            break
        tnode.replayers[ls].poll()
        self.emit(target, "migrate-8", f"replayed={tnode.replayers[ls].replayed_lsn}")
        members = self.meta.view.get_json(f"ls/{ls}/members".encode(), [])
        self.meta.put_json(f"ls/{ls}/members", sorted(set(members) | {tnode.node_id}))
        join(self.meta, tnode.node_id)
        self.emit(target, "migrate-9", "member list updated")
        total = sum(
            (t.tables.major.size_bytes if t.tables.major else 0) + sum(x.size_bytes for x in t.tables.increments)
            for tid, t in source.tablets.items()
            if tid in tids
        )
        result = {
            "source": source.name,
            "attempts": attempts,
            "node_to_node": private + copied.node_to_node,
            "from_distributed": copied.from_distributed,
            "from_store": copied.from_store,
            "total_bytes": total,
        }
        self.emit(target, "migrate-10", f"node_to_node={result['node_to_node']} total={total}")
        self.schedule(self.config.replay_interval_ms, target, "replay")
        return result

    def _replayed_lsn(self, node: SimNode, ls: int) -> int:
        if node.role is Role.RW:
            return self.logs.committed_end(ls)
        r = node.replayers.get(ls)
        return r.replayed_lsn if r else 0

    # -- checks ------------------------------------------------------------------
    def check_acked(self, node: SimNode | None = None) -> list[str]:
        """Acknowledged writes that ``node`` cannot see.

        The newest ack of every key must be the current value; older acks are
        checked at their own scn while that scn is still retained.
        """
        node = node or self.rw
        bad = []
        newest: dict[tuple[int, bytes], tuple[bytes | None, Scn]] = {}
        top = 0
        for tid, key, value, scn in self.acked:
            newest[(tid, key)] = (value, scn)
            top = max(top, scn)
        for tid, key, value, scn in self.acked:
            t = node.tablets.get(tid)
            if t is not None and scn >= t.floor and node.read(tid, key, scn) != value:
                bad.append(f"tablet {tid} {key!r}@{scn}")
        for (tid, key), (value, scn) in sorted(newest.items()):
            if tid in node.tablets and node.read(tid, key, max(top, node.tablets[tid].floor)) != value:
                bad.append(f"tablet {tid} {key!r} latest@{scn}")
        return bad

    def quiesce(self) -> None:
        """Let replicas catch up: poll every RO until nothing new arrives."""
        self._update_index()
        for n in self.compute_nodes():
            if n.alive and n.role is Role.RO and not n.partitioned:
                self._replay(n)

    def trace_text(self) -> str:
        return "\n".join(self.trace) + "\n"


class OpStream:
    """Endless op stream generated in seeded chunks.

    A plain object rather than a generator so simulation state deep-copies.
    """

    CHUNK = 4096

    def __init__(self, spec: WorkloadSpec, seed: int):
        self.spec = WorkloadSpec(**{**spec.__dict__, "ops": self.CHUNK})
        self.seed = seed
        self.chunk = -1
        self.buf: list[Op] = []
        self.pos = 0

    def __next__(self) -> Op:
        if self.pos >= len(self.buf):
            self.chunk += 1
            self.buf = gen_workload(self.spec, self.seed * 1_000_003 + self.chunk)
            self.pos = 0
        self.pos += 1
        return self.buf[self.pos - 1]


def run_simulation(config: SimConfig, workload: WorkloadSpec | None = None) -> Simulation:
    sim = Simulation(config, workload)
    sim.run()
    return sim
