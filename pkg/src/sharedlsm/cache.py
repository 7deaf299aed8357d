"""Block caching: ARC replacement and the three-tier cache.

Tiers, fastest first: an in-memory micro-block cache, a local persistent
cache of macro-blocks on the compute node, and a distributed macro-block
cache (:class:`BlockServer`) shared by the nodes of one availability zone.
The object store behind them is the source of truth.

Entries carry a version.  A writer that changes an object bumps its version
through SSLog; readers pass the version they observed and any tier holding
an older copy treats it as a miss.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

from .core import MacroBlock, MacroRef, MicroBlock, SsTable, decode_macro_block
from .errors import CorruptBlock
from .objstore import ObjectStore

log = logging.getLogger(__name__)

MEMORY_LATENCY_MS = 0.01
LOCAL_LATENCY_MS = 1.0
DISTRIBUTED_LATENCY_MS = 10.0


class ArcCache:
    """Adaptive replacement over keys, capacity counted in entries.

    T1/T2 hold resident keys seen once / at least twice; B1/B2 remember keys
    recently evicted from each.  Every OrderedDict runs LRU-first.  Resident
    values live in :attr:`data`; ghosts keep no value.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.c = capacity
        self.p = 0.0
        self.t1: OrderedDict[Hashable, None] = OrderedDict()
        self.t2: OrderedDict[Hashable, None] = OrderedDict()
        self.b1: OrderedDict[Hashable, None] = OrderedDict()
        self.b2: OrderedDict[Hashable, None] = OrderedDict()
        self.data: dict = {}
        self.hits = 0
        self.misses = 0

    def __contains__(self, key) -> bool:
        return key in self.t1 or key in self.t2

    def __len__(self) -> int:
        return len(self.t1) + len(self.t2)

    def resident(self) -> list:
        return list(self.t1) + list(self.t2)

    def _evict_to_ghost(self, src: OrderedDict, ghost: OrderedDict) -> None:
        key, _ = src.popitem(last=False)
        ghost[key] = None
        self.data.pop(key, None)

    def _replace(self, in_b2: bool) -> None:
        if len(self) < self.c:
            return
        t1 = len(self.t1)
        if t1 and (t1 > self.p or (in_b2 and t1 == self.p)):
            self._evict_to_ghost(self.t1, self.b1)
        elif self.t2:
            self._evict_to_ghost(self.t2, self.b2)
        else:
            self._evict_to_ghost(self.t1, self.b1)

    def access(self, key, value=None) -> bool:
        """One reference to ``key``; returns True on a hit."""
        if key in self.t1 or key in self.t2:
            (self.t1 if key in self.t1 else self.t2).pop(key)
            self.t2[key] = None
            if value is not None:
                self.data[key] = value
            self.hits += 1
            return True
        self.misses += 1
        if key in self.b1:
            d = 1.0 if len(self.b1) >= len(self.b2) else len(self.b2) / len(self.b1)
            self.p = min(float(self.c), self.p + d)
            self._replace(False)
            del self.b1[key]
            self.t2[key] = None
        elif key in self.b2:
            d = 1.0 if len(self.b2) >= len(self.b1) else len(self.b1) / len(self.b2)
            self.p = max(0.0, self.p - d)
            self._replace(True)
            del self.b2[key]
            self.t2[key] = None
        else:
            l1 = len(self.t1) + len(self.b1)
            total = l1 + len(self.t2) + len(self.b2)
            if l1 >= self.c:
                if len(self.t1) < self.c:
                    self.b1.popitem(last=False)
                    self._replace(False)
                else:
                    k, _ = self.t1.popitem(last=False)
                    self.data.pop(k, None)
            elif total >= self.c:
                if total >= 2 * self.c:
                    self.b2.popitem(last=False)
                self._replace(False)
            self.t1[key] = None
        if value is not None:
            self.data[key] = value
        return False

    def get(self, key):
        return self.data.get(key)

    def remove(self, key) -> None:
        """Forget a resident key entirely (used on invalidation)."""
        for lst in (self.t1, self.t2):
            lst.pop(key, None)
        self.data.pop(key, None)

    def resize(self, capacity: int) -> list:
        """Change capacity; returns keys moved from resident to ghost.

        Shrinking evicts from the T1 tail, then the T2 tail, into the matching
        ghost list, then trims ghosts back inside the ARC bounds.  Growing only
        raises the bounds.
        """
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        evicted = []
        self.c = capacity
        while len(self) > self.c:
            if self.t1:
                evicted.append(next(iter(self.t1)))
                self._evict_to_ghost(self.t1, self.b1)
            else:
                evicted.append(next(iter(self.t2)))
                self._evict_to_ghost(self.t2, self.b2)
        while len(self.t1) + len(self.b1) > self.c and self.b1:
            self.b1.popitem(last=False)
        while len(self.t1) + len(self.t2) + len(self.b1) + len(self.b2) > 2 * self.c:
            (self.b2 if self.b2 else self.b1).popitem(last=False)
        self.p = min(self.p, float(self.c))
        return evicted

    def check(self) -> None:
        """Raise AssertionError if any structural invariant is broken."""
        t1, t2, b1, b2 = self.t1, self.t2, self.b1, self.b2
        assert len(t1) + len(t2) <= self.c, "resident overflow"
        assert len(t1) + len(b1) <= self.c, "L1 overflow"
        assert len(t1) + len(t2) + len(b1) + len(b2) <= 2 * self.c, "directory overflow"
        assert 0 <= self.p <= self.c, "target out of range"
        # each list has unique keys, so the union is short only on overlap
        assert len({*t1, *t2, *b1, *b2}) == len(t1) + len(t2) + len(b1) + len(b2), "lists not disjoint"
        assert not self.data.keys() - t1.keys() - t2.keys(), "ghost holds a value"

    def ghost_snapshot(self) -> dict:
        return {"b1": [repr(k) for k in self.b1], "b2": [repr(k) for k in self.b2], "p": self.p}


# -- tiers ----------------------------------------------------------------------


@dataclass
class TierStats:
    hits: int = 0
    misses: int = 0
    bytes_served: int = 0

    def ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


class Tier:
    """A versioned ARC tier.  Values are ``(version, payload, nbytes)``."""

    def __init__(self, name: str, capacity: int, latency_ms: float):
        self.name = name
        self.arc = ArcCache(capacity)
        self.latency_ms = latency_ms
        self.stats = TierStats()

    def lookup(self, key, version: int):
        entry = self.arc.get(key)
        if entry is None or key not in self.arc:
            self.stats.misses += 1
            return None
        if entry[0] < version:
            self.arc.remove(key)
            self.stats.misses += 1
            return None
        self.arc.access(key)
        self.stats.hits += 1
        self.stats.bytes_served += entry[2]
        return entry[1]

    def admit(self, key, version: int, payload, nbytes: int) -> None:
        cur = self.arc.get(key)
        if cur is not None and key in self.arc:
            if cur[0] <= version:
                self.arc.data[key] = (version, payload, nbytes)
            return
        self.arc.access(key, (version, payload, nbytes))

    def drop(self, key) -> None:
        self.arc.remove(key)

    def residency(self) -> int:
        return len(self.arc)

    def resize(self, capacity: int) -> list:
        return self.arc.resize(capacity)


class BlockServer:
    """Distributed macro-block cache shared by every node in one zone."""

    def __init__(self, capacity: int, latency_ms: float = DISTRIBUTED_LATENCY_MS, server_id: int = 0):
        self.server_id = server_id
        self.tier = Tier("distributed", capacity, latency_ms)
        self.up = True

    def get(self, key: str, version: int) -> bytes | None:
        if not self.up:
            return None
        return self.tier.lookup(key, version)

    def put(self, key: str, version: int, data: bytes) -> None:
        if self.up:
            self.tier.admit(key, version, data, len(data))

    def holds(self, key: str, version: int = 0) -> bool:
        entry = self.tier.arc.get(key)
        return self.up and entry is not None and entry[0] >= version


def ghost_key(node_id: int, epoch: int) -> str:
    return f"cache/ghost/{node_id}/{epoch}"


@dataclass
class CacheConfig:
    memory_entries: int = 256
    local_entries: int = 1024
    memory_latency_ms: float = MEMORY_LATENCY_MS
    local_latency_ms: float = LOCAL_LATENCY_MS

    def __post_init__(self):
        if self.memory_entries < 1 or self.local_entries < 1:
            raise ValueError("tier capacities must be >= 1")


@dataclass
class AccessLog:
    """Which tier served each request, in order."""

    served: list[str] = field(default_factory=list)
    latency_ms: float = 0.0

    def ratio(self, *tiers: str) -> float:
        if not self.served:
            return 0.0
        return sum(1 for s in self.served if s in tiers) / len(self.served)


def _unversioned(key: str) -> int:
    return 0


class TieredCache:
    """A node's view of blocks: memory, local, distributed, then object store.

    Also acts as the engine's block source.  ``local_files`` is the node's
    private local disk (dumped SSTables not yet in shared storage); they are
    served at local latency and never leave the node through this cache.
    ``version_of`` gives the version a reader must observe for an object.
    """

    def __init__(
        self,
        node_id: int,
        store: ObjectStore,
        *,
        config: CacheConfig | None = None,
        block_server: BlockServer | None = None,
        local_files: dict[str, bytes] | None = None,
        version_of: Callable[[str], int] | None = None,
        observer: Callable[[str], None] | None = None,
    ):
        self.node_id = node_id
        self.store = store
        self.config = config or CacheConfig()
        self.memory = Tier("memory", self.config.memory_entries, self.config.memory_latency_ms)
        self.local = Tier("local", self.config.local_entries, self.config.local_latency_ms)
        self.dist = block_server
        self.local_files = {} if local_files is None else local_files
        self.version_of = version_of or _unversioned
        self.observer = observer
        self.refs: dict[str, MacroRef] = {}
        self.log = AccessLog()
        self.store_reads = 0
        self.prefetched = 0
        self.epoch = 0

    # -- lookups ---------------------------------------------------------------
    def _charge(self, tier: str, ms: float) -> None:
        self.log.served.append(tier)
        self.log.latency_ms += ms

    def _fetch_macro(self, key: str, version: int) -> tuple[MacroBlock, str, float]:
        data = self.local_files.get(key)
        if data is not None:
            return decode_macro_block(data), "local", self.local.latency_ms
        hit = self.local.lookup(key, version)
        if hit is not None:
            return hit, "local", self.local.latency_ms
        if self.dist is not None:
            raw = self.dist.get(key, version)
            if raw is not None:
                block = decode_macro_block(raw)
                self.local.admit(key, version, block, len(raw))
                return block, "dist", self.dist.tier.latency_ms
        raw = self.store.get(key)
        cost = self.store.last_cost_ms
        self.store_reads += 1
        block = decode_macro_block(raw)
        if self.dist is not None:
            self.dist.put(key, version, raw)
        self.local.admit(key, version, block, len(raw))
        return block, "store", cost

    def get_block(self, key: str, expected_version: int | None = None) -> tuple[MacroBlock, str]:
        """Macro-block by object key and the tier that served it."""
        version = self.version_of(key) if expected_version is None else expected_version
        block, tier, ms = self._fetch_macro(key, version)
        self._charge(tier, ms)
        return block, tier

    def get_micro(self, key: str, idx: int, expected_version: int | None = None) -> tuple[MicroBlock, str]:
        version = self.version_of(key) if expected_version is None else expected_version
        hit = self.memory.lookup((key, idx), version)
        if hit is not None:
            self._charge("memory", self.memory.latency_ms)
            return hit, "memory"
        block, tier, ms = self._fetch_macro(key, version)
        micro = block.micro_blocks[idx]
        self.memory.admit((key, idx), version, micro, micro.size_bytes)
        self._charge(tier, ms)
        return micro, tier

    # BlockSource protocol
    def macro(self, ref: MacroRef) -> MacroBlock:
        self.refs[ref.key] = ref
        if self.observer is not None:
            self.observer(ref.key)
        block, _ = self.get_block(ref.key)
        if block.content_hash != ref.content_hash:
            raise CorruptBlock(f"{ref.key}: cached block does not match metadata")
        return block

    def micro(self, ref: MacroRef, idx: int) -> MicroBlock:
        self.refs[ref.key] = ref
        if self.observer is not None:
            self.observer(ref.key)
        micro, _ = self.get_micro(ref.key, idx)
        return micro

    # -- maintenance -----------------------------------------------------------
    def forget(self, key: str) -> None:
        """Drop every copy this node holds of ``key`` (memory and local)."""
        self.local.drop(key)
        for k in [k for k in self.memory.arc.data if k[0] == key]:
            self.memory.drop(k)

    def refresh(self, table: SsTable) -> None:
        for ref in table.macro_blocks:
            self.forget(ref.key)

    def resize(self, tier: str, capacity: int) -> list:
        """Resize a tier and persist its ghost lists to the object store."""
        t = {"memory": self.memory, "local": self.local}[tier]
        evicted = t.resize(capacity)
        self.epoch += 1
        snap = dict(t.arc.ghost_snapshot(), tier=tier, capacity=capacity)
        self.store.put(ghost_key(self.node_id, self.epoch), json.dumps(snap, sort_keys=True).encode())
        return evicted

    def resident_keys(self) -> set:
        return {("m",) + k for k in self.memory.arc.resident()} | {("M", k) for k in self.local.arc.resident()}

    def hot_macro_keys(self) -> list[str]:
        """Macro keys in the frequency lists of the memory and local tiers."""
        keys = [k[0] for k in self.memory.arc.t2] + list(self.local.arc.t2)
        return list(dict.fromkeys(keys))

    def metrics(self) -> dict:
        out = {}
        for t in (self.memory, self.local) + ((self.dist.tier,) if self.dist else ()):
            out[t.name] = {
                "hits": t.stats.hits,
                "misses": t.stats.misses,
                "bytes_served": t.stats.bytes_served,
                "residency": t.residency(),
            }
        out["store_reads"] = self.store_reads
        return out

    # -- warming ---------------------------------------------------------------
    def _prefetch(self, ref: MacroRef) -> None:
        version = self.version_of(ref.key)
        if self.local.arc.get(ref.key) is not None and ref.key in self.local.arc:
            return
        self.refs[ref.key] = ref
        raw = None
        if self.dist is not None:
            raw = self.dist.get(ref.key, version)
        if raw is None:
            raw = self.store.get(ref.key)
            self.store_reads += 1
            if self.dist is not None:
                self.dist.put(ref.key, version, raw)
        self.local.admit(ref.key, version, decode_macro_block(raw), len(raw))
        self.prefetched += 1

    def warm_baseline(self, new_major: SsTable) -> int:
        """Prefetch the new baseline's blocks that cover currently hot keys."""
        hot = [self.refs[k] for k in self.hot_macro_keys() if k in self.refs]
        if not hot:
            return 0
        n = 0
        for ref in new_major.macro_blocks:
            if any(ref.first_key <= h.last_key and h.first_key <= ref.last_key for h in hot):
                try:
                    self._prefetch(ref)
                    n += 1
                except Exception as exc:  # best effort: a failed prefetch is a later miss
                    log.debug("prefetch of %s failed: %s", ref.key, exc)
        return n

    def access_sequence(self) -> list[tuple[str, object, int]]:
        """(tier, key, count) in replay order: least recent first, T1 before T2."""
        seq: list[tuple[str, object, int]] = []
        for name, tier in (("local", self.local), ("memory", self.memory)):
            seq.extend((name, k, 1) for k in tier.arc.t1)
            seq.extend((name, k, 2) for k in tier.arc.t2)
        return seq

    def warm_follower(self, sequence: Sequence[tuple[str, object, int]]) -> int:
        """Admit a leader's access sequence; returns entries touched."""
        n = 0
        for tier_name, key, count in sequence:
            tier = self.memory if tier_name == "memory" else self.local
            mkey = key[0] if tier_name == "memory" else key
            have = 2 if key in tier.arc.t2 else 1 if key in tier.arc.t1 else 0
            if have >= count:
                continue
            if have == 0:
                version = self.version_of(mkey)
                block = self._quiet_macro(mkey, version)
                if tier_name == "memory":
                    micro = block.micro_blocks[key[1]]
                    tier.admit(key, version, micro, micro.size_bytes)
                else:
                    tier.admit(key, version, block, len(block.encoded))
                have = 1
            for _ in range(count - have):
                tier.arc.access(key)
            n += 1
        return n

    def _quiet_macro(self, key: str, version: int) -> MacroBlock:
        entry = self.local.arc.get(key)
        if entry is not None and entry[0] >= version:
            return entry[1]
        raw = self.dist.get(key, version) if self.dist is not None else None
        if raw is None:
            raw = self.store.get(key)
            self.store_reads += 1
            if self.dist is not None:
                self.dist.put(key, version, raw)
        return decode_macro_block(raw)


def sync_access_sequence(leader: TieredCache, followers: Iterable[TieredCache]) -> list:
    seq = leader.access_sequence()
    for f in followers:
        f.refs.update(leader.refs)
        f.warm_follower(seq)
    return seq


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class MigrationCopy:
    node_to_node: int = 0
    from_distributed: int = 0
    from_store: int = 0
    blocks: int = 0


def warm_migration(
    source: TieredCache,
    target: TieredCache,
    baseline_keys: Iterable[str] = (),
    live: Iterable[str] | None = None,
) -> MigrationCopy:
    """Give the target the source's hot macro-blocks.

    Increments come from the distributed tier when it holds them, the
    baseline from shared storage; only blocks neither shared route can supply
    travel node to node.  With ``live`` given, blocks outside it (other
    tablets, or retired ones) are skipped.
    """
    out = MigrationCopy()
    baseline = set(baseline_keys)
    live = None if live is None else set(live)
    for key in source.hot_macro_keys():
        if live is not None and key not in live:
            continue
        version = source.version_of(key)
        entry = source.local.arc.get(key)
        if key in source.refs:
            target.refs[key] = source.refs[key]
        raw = None
        if key not in baseline and target.dist is not None:
            raw = target.dist.get(key, version)
            if raw is not None:
                out.from_distributed += len(raw)
        if raw is None and key in baseline:
            raw = target.store.get(key)
            target.store_reads += 1
            out.from_store += len(raw)
        if raw is None and key in target.local_files:
            raw = target.local_files[key]  # already copied with the private data
        if raw is None:
            if entry is not None and entry[0] >= version:
                raw = entry[1].encoded
            elif key in source.local_files:
                raw = source.local_files[key]
            if raw is not None:
                out.node_to_node += len(raw)
            else:
                raw = target.store.get(key)
                target.store_reads += 1
                out.from_store += len(raw)
        target.local.admit(key, version, decode_macro_block(raw), len(raw))
        target.local.arc.access(key)
        out.blocks += 1
    return out


class VersionReader:
    """``version_of`` backed by anything with a metadata ``view`` (a
    metadata service or a node's replica), read at call time."""

    def __init__(self, holder):
        self.holder = holder

    def __call__(self, key: str) -> int:
        return self.holder.view.get_json(f"cachever/{key}".encode(), 0)


def invalidate(meta, key: str, new_version: int) -> bool:
    """Record a version bump in SSLog; a repeat with the same version is a no-op."""
    cur = meta.view.get_json(f"cachever/{key}".encode(), 0)
    if new_version <= cur:
        return False
    meta.put_json(f"cachever/{key}", new_version)
    return True
