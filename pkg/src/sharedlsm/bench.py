"""Storage cost model and benchmark driver over the cluster simulator."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DomainError
from .sim import SimConfig, Simulation
from .workload import WorkloadSpec

# Cloud-disk cache cost, as a fraction of the shared-nothing per-GB cost,
# that shared storage still pays on the hot set.
CACHE_OVERHEAD = 0.15


@dataclass(frozen=True)
class CostInputs:
    s: float  # spatial utilization
    p: float  # hot data ratio
    n: int  # replica count

    def __post_init__(self):
        if not 0 < self.s <= 1:
            raise DomainError(f"spatial utilization must be in (0, 1], got {self.s}")
        if not 0 <= self.p <= 1:
            raise DomainError(f"hot data ratio must be in [0, 1], got {self.p}")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"replica count must be a positive integer, got {self.n}")


def cost_savings(s: float, p: float, n: int) -> float:
    """Factor by which shared storage cuts cost versus N full replicas.

    Save = N / ((0.15 + P * N) * S)
    """
    if s == 0:
        raise DomainError("spatial utilization S must be non-zero")
    c = CostInputs(s, p, n)
    return c.n / ((CACHE_OVERHEAD + c.p * c.n) * c.s)


@dataclass(frozen=True)
class PricingTable:
    cloud_disk_per_gb_month: float = 0.10
    object_store_per_gb_month: float = 0.023
    capacity_gb: float = 100_000.0
    replicas_shared_nothing: int = 3
    replicas_shared_storage: int = 1

    def __post_init__(self):
        if min(self.cloud_disk_per_gb_month, self.object_store_per_gb_month, self.capacity_gb) < 0:
            raise DomainError("prices and capacity must be non-negative")
        if self.replicas_shared_nothing < 1 or self.replicas_shared_storage < 1:
            raise DomainError("replica counts must be positive")

    @classmethod
    def from_json(cls, text: str) -> PricingTable:
        return cls(**json.loads(text))


SCENARIO_CACHE_RATIO = {"oltp": 1.0, "olap": 0.1}


@dataclass(frozen=True)
class CostComparison:
    shared_nothing: float
    shared_storage: float
    savings_pct: float


def storage_cost_compare(
    pricing: PricingTable, scenario: str = "oltp", cache_ratio: float | None = None
) -> CostComparison:
    """Monthly storage totals of both architectures and the percent saved."""
    if cache_ratio is None:
        try:
            cache_ratio = SCENARIO_CACHE_RATIO[scenario.lower()]
        except KeyError:
            raise DomainError(f"unknown scenario {scenario!r}") from None
    if not 0 <= cache_ratio <= 1:
        raise DomainError("cache ratio must be in [0, 1]")
    cap = pricing.capacity_gb
    nothing = pricing.cloud_disk_per_gb_month * cap * pricing.replicas_shared_nothing
    shared = (
        pricing.cloud_disk_per_gb_month * cap * cache_ratio * pricing.replicas_shared_storage
        + pricing.object_store_per_gb_month * cap
    )
    pct = 100.0 * (1 - shared / nothing) if nothing else 0.0
    return CostComparison(round(nothing, 6), round(shared, 6), round(pct, 6))


# -- metrics --------------------------------------------------------------------

CSV_COLUMNS = ("time_ms", "ops", "hit_mem", "hit_local", "hit_dist", "hit_overall", "stalls")


@dataclass
class Bucket:
    time_ms: float
    ops: int
    hit_mem: float
    hit_local: float
    hit_dist: float
    hit_overall: float
    stalls: int


@dataclass
class MetricsReport:
    buckets: list[Bucket] = field(default_factory=list)
    stall_windows: list[tuple[float, float]] = field(default_factory=list)
    bytes_to_store: int = 0
    bytes_from_store: int = 0
    compactions: dict[str, int] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def stall_count(self) -> int:
        return len(self.stall_windows)

    def throughput(self) -> list[int]:
        return [b.ops for b in self.buckets]


def stall_windows(stalled: list[int], bucket_ms: float) -> list[tuple[float, float]]:
    """Merge runs of stalled buckets into disjoint (start_ms, duration_ms)."""
    out: list[tuple[float, float]] = []
    start = None
    for i, s in enumerate(stalled + [0]):
        if s and start is None:
            start = i
        elif not s and start is not None:
            out.append((start * bucket_ms, (i - start) * bucket_ms))
            start = None
    return out


def collect_report(sim: Simulation) -> MetricsReport:
    m = sim.metrics
    bms = sim.config.bucket_ms
    buckets = []
    for i, (ops, served, stall) in enumerate(zip(m.ops, m.served, m.stalls)):
        total = sum(served.values())
        frac = {k: (v / total if total else 0.0) for k, v in served.items()}
        buckets.append(
            Bucket(
                (i + 1) * bms,
                ops,
                frac["memory"],
                frac["local"],
                frac["dist"],
                frac["memory"] + frac["local"] + frac["dist"],
                stall,
            )
        )
    return MetricsReport(
        buckets,
        stall_windows(list(m.stalls), bms),
        sim.store.stats.bytes_written,
        sim.store.stats.bytes_read,
        dict(sorted(m.compactions.items())),
        list(sim.violations),
    )


def run_bench(config: SimConfig, workload: WorkloadSpec | None = None) -> tuple[MetricsReport, Simulation]:
    sim = Simulation(config, workload)
    sim.run()
    return collect_report(sim), sim


def emit_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for b in report.buckets:
        w.writerow([repr(float(b.time_ms)), b.ops, repr(b.hit_mem), repr(b.hit_local), repr(b.hit_dist),
                    repr(b.hit_overall), b.stalls])
    return buf.getvalue()


def parse_csv(text: str) -> list[Bucket]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError("not a metrics CSV: header mismatch")
    out = []
    for r in rows[1:]:
        out.append(Bucket(float(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]), int(r[6])))
    return out


def emit_table(report: MetricsReport) -> str:
    lines = [" ".join(f"{c:>11}" for c in CSV_COLUMNS)]
    for b in report.buckets:
        lines.append(
            f"{b.time_ms:>11.0f} {b.ops:>11} {b.hit_mem:>11.3f} {b.hit_local:>11.3f} "
            f"{b.hit_dist:>11.3f} {b.hit_overall:>11.3f} {b.stalls:>11}"
        )
    lines.append(f"stall windows: {report.stall_count}")
    lines.append(f"bytes to store: {report.bytes_to_store}  from store: {report.bytes_from_store}")
    lines.append("compactions: " + ", ".join(f"{k}={v}" for k, v in report.compactions.items()))
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, sim: Simulation, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(emit_csv(report))
    (out_dir / "trace.csv").write_text(sim.trace_text())
    summary = asdict(report)
    summary.pop("buckets")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
