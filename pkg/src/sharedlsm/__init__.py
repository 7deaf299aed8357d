"""An LSM storage engine over shared object storage, with a replicated log,
SSLog metadata, tiered caching, coordinated GC, and a deterministic cluster
simulator."""

from .bench import cost_savings, storage_cost_compare, PricingTable, run_bench, MetricsReport
from .core import Row, SsTable, SsTableKind, crc32, logical_checksum
from .sim import SimConfig, Simulation

__version__ = "0.1.0"

__all__ = [
    "MetricsReport",
    "PricingTable",
    "Row",
    "SimConfig",
    "Simulation",
    "SsTable",
    "SsTableKind",
    "cost_savings",
    "crc32",
    "logical_checksum",
    "run_bench",
    "storage_cost_compare",
]
