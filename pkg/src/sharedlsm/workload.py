"""Deterministic synthetic workloads (uniform, zipfian or hotspot keys; put/get mix)."""

from __future__ import annotations

import configparser
import random
from bisect import bisect_left
from dataclasses import dataclass, fields
from itertools import accumulate


@dataclass(frozen=True)
class Op:
    kind: str  # "put" or "get"
    key: int
    value: bytes = b""


@dataclass
class WorkloadSpec:
    distribution: str = "uniform"
    theta: float = 0.99
    put_fraction: float = 0.5
    get_fraction: float = 0.5
    keys: int = 1000
    ops: int = 1000
    concurrency: int = 1
    value_size: int = 32
    hot_fraction: float = 0.0
    hot_weight: float = 0.9

    def __post_init__(self):
        if self.distribution not in ("uniform", "zipfian", "hotspot"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if abs(self.put_fraction + self.get_fraction - 1.0) > 1e-9:
            raise ValueError("put_fraction + get_fraction must equal 1")
        if not (0 <= self.put_fraction <= 1 and 0 <= self.get_fraction <= 1):
            raise ValueError("fractions must lie in [0, 1]")
        if self.keys < 1 or self.ops < 0 or self.concurrency < 1:
            raise ValueError("keys and concurrency must be >= 1, ops >= 0")
        if self.distribution == "zipfian" and self.theta <= 0:
            raise ValueError("zipfian theta must be positive")
        if self.distribution == "hotspot" and not 0 < self.hot_fraction <= 1:
            raise ValueError("hotspot needs 0 < hot_fraction <= 1")

    @classmethod
    def from_ini(cls, text: str, section: str = "workload") -> WorkloadSpec:
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if not cp.has_section(section):
            raise ValueError(f"missing [{section}] section")
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in cp.items(section):
            if k not in types:
                raise ValueError(f"unknown workload key {k!r}")
            t = types[k]
            kw[k] = v if t == "str" else float(v) if t == "float" else int(v)
        return cls(**kw)


class KeyChooser:
    def __init__(self, spec: WorkloadSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        if spec.distribution == "zipfian":
            weights = [1.0 / (i + 1) ** spec.theta for i in range(spec.keys)]
            self.cum = list(accumulate(weights))

    def next(self) -> int:
        s = self.spec
        if s.distribution == "uniform":
            return self.rng.randrange(s.keys)
        if s.distribution == "zipfian":
            x = self.rng.random() * self.cum[-1]
            return min(bisect_left(self.cum, x), s.keys - 1)
        hot = max(1, int(s.keys * s.hot_fraction))
        if self.rng.random() < s.hot_weight:
            return self.rng.randrange(hot)
        return self.rng.randrange(s.keys)


def gen_workload(spec: WorkloadSpec, seed: int) -> list[Op]:
    """The same spec and seed always give the same op stream."""
    rng = random.Random(seed)
    chooser = KeyChooser(spec, rng)
    out = []
    for i in range(spec.ops):
        key = chooser.next()
        if rng.random() < spec.put_fraction:
            val = (f"{seed}:{i}:".encode() + b"x" * spec.value_size)[: max(spec.value_size, 1)]
            out.append(Op("put", key, val))
        else:
            out.append(Op("get", key))
    return out


def key_bytes(i: int) -> bytes:
    return b"key%08d" % i
