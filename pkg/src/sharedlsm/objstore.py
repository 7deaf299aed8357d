"""Shared object storage: an S3-like blob store without mutual exclusion.

Two backends honour one contract.  :class:`MemoryObjectStore` is the
deterministic default and charges simulated latency for every call;
:class:`FsObjectStore` persists under a directory for CLI runs.

Overwrites are whole-object, last-writer-wins.  Nothing here offers
compare-and-swap; callers that need exclusivity hold a lease.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import InjectedFailure, NotFound, RangeOutOfBounds

OBJECT_STORE_LATENCY_MS = 100.0
DEFAULT_BANDWIDTH = 100 * 1024.0  # bytes per simulated ms


@dataclass
class StoreConfig:
    base_latency: float = OBJECT_STORE_LATENCY_MS
    bandwidth: float = DEFAULT_BANDWIDTH
    failure_schedule: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.base_latency < 0:
            raise ValueError("base_latency must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")


@dataclass
class StoreStats:
    ops: int = 0
    gets: int = 0
    puts: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    charged_ms: float = 0.0


def check_key(key: str) -> str:
    if not key or any(seg == "" for seg in key.split("/")):
        raise ValueError(f"invalid object key {key!r}")
    return key


class ObjectStore:
    """Backend-independent bookkeeping: op counting, failure injection, cost."""

    def __init__(self, config: StoreConfig | None = None):
        self.config = config or StoreConfig()
        self.stats = StoreStats()
        self._failures = dict(self.config.failure_schedule)
        self.last_cost_ms = 0.0
        self.deleted: set[str] = set()

    # failure injection --------------------------------------------------
    def fail_at(self, op_index: int, error: str = "injected") -> None:
        self._failures[op_index] = error

    def fail_next(self, error: str = "injected") -> None:
        self._failures[self.stats.ops] = error

    def _charge(self, nbytes: int) -> None:
        idx = self.stats.ops
        self.stats.ops += 1
        cost = self.config.base_latency + nbytes / self.config.bandwidth
        self.last_cost_ms = cost
        self.stats.charged_ms += cost
        if idx in self._failures:
            raise InjectedFailure(f"op {idx}: {self._failures.pop(idx)}")

    # public contract ----------------------------------------------------
    def put(self, key: str, data: bytes) -> None:
        check_key(key)
        self._charge(len(data))
        self._store(key, bytes(data))
        self.stats.puts += 1
        self.stats.bytes_written += len(data)

    def get(self, key: str) -> bytes:
        data = self._peek(key)
        self._charge(len(data))
        self.stats.gets += 1
        self.stats.bytes_read += len(data)
        return data

    def get_range(self, key: str, offset: int, length: int) -> bytes:
        data = self._peek(key)
        if offset < 0 or length < 0 or offset + length > len(data):
            raise RangeOutOfBounds(f"{key}: [{offset}, {offset + length}) of {len(data)}")
        self._charge(length)
        self.stats.gets += 1
        self.stats.bytes_read += length
        return data[offset : offset + length]

    def append(self, key: str, data: bytes) -> int:
        check_key(key)
        self._charge(len(data))
        try:
            current = self._peek(key)
        except NotFound:
            current = b""
        self._store(key, current + data)
        self.stats.bytes_written += len(data)
        return len(current) + len(data)

    def multiupload(self, key: str, parts: Iterable[bytes]) -> None:
        """Upload parts then complete; the key appears only on completion."""
        check_key(key)
        parts = list(parts)
        if not parts:
            raise ValueError("multiupload needs at least one part")
        staged = []
        try:
            for i, part in enumerate(parts):
                self._charge(len(part))
                self._stage(key, i, part)
                staged.append(i)
            self._charge(0)
        except InjectedFailure:
            self._drop_parts(key)
            raise
        self._complete(key, len(parts))
        self.stats.puts += 1
        self.stats.bytes_written += sum(len(p) for p in parts)

    def list(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self._keys() if k.startswith(prefix))

    def delete(self, key: str) -> None:
        self._charge(0)
        self._remove(key)
        self.deleted.add(key)

    def exists(self, key: str) -> bool:
        try:
            self._peek(key)
        except NotFound:
            return False
        return True

    def size(self, key: str) -> int:
        return len(self._peek(key))

    # backend hooks ------------------------------------------------------
    def _peek(self, key: str) -> bytes:
        raise NotImplementedError

    def _store(self, key: str, data: bytes) -> None:
        raise NotImplementedError

    def _remove(self, key: str) -> None:
        raise NotImplementedError

    def _keys(self) -> Iterable[str]:
        raise NotImplementedError

    def _stage(self, key: str, idx: int, part: bytes) -> None:
        raise NotImplementedError

    def _complete(self, key: str, nparts: int) -> None:
        raise NotImplementedError

    def _drop_parts(self, key: str) -> None:
        raise NotImplementedError


class MemoryObjectStore(ObjectStore):
    def __init__(self, config: StoreConfig | None = None):
        super().__init__(config)
        self._objects: dict[str, bytes] = {}
        self._parts: dict[str, dict[int, bytes]] = {}

    def _peek(self, key):
        try:
            return self._objects[key]
        except KeyError:
            raise NotFound(key) from None

    def _store(self, key, data):
        self._objects[key] = data
        self.deleted.discard(key)

    def _remove(self, key):
        self._objects.pop(key, None)

    def _keys(self):
        return self._objects.keys()

    def _stage(self, key, idx, part):
        self._parts.setdefault(key, {})[idx] = bytes(part)

    def _complete(self, key, nparts):
        staged = self._parts.pop(key)
        self._store(key, b"".join(staged[i] for i in range(nparts)))

    def _drop_parts(self, key):
        self._parts.pop(key, None)

    def snapshot(self) -> dict[str, bytes]:
        return dict(self._objects)


class FsObjectStore(ObjectStore):
    """Objects as files under ``root``; replaces go through write-temp-then-rename."""

    PARTS = ".parts"

    def __init__(self, root: str | os.PathLike, config: StoreConfig | None = None):
        super().__init__(config or StoreConfig(base_latency=0.0))
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root.joinpath(*check_key(key).split("/"))

    def _atomic_write(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def _peek(self, key):
        path = self._path(key)
        if not path.is_file():
            raise NotFound(key)
        return path.read_bytes()

    def _store(self, key, data):
        self._atomic_write(self._path(key), data)
        self.deleted.discard(key)

    def _remove(self, key):
        try:
            self._path(key).unlink()
        except FileNotFoundError:
            pass

    def _keys(self):
        for path in self.root.rglob("*"):
            rel = path.relative_to(self.root)
            if not path.is_file() or rel.parts[0] == self.PARTS or rel.name.startswith(".tmp-"):
                continue
            yield "/".join(rel.parts)

    def _parts_dir(self, key: str) -> Path:
        return self.root / self.PARTS / key.replace("/", "%2F")

    def _stage(self, key, idx, part):
        d = self._parts_dir(key)
        d.mkdir(parents=True, exist_ok=True)
        self._atomic_write(d / f"{idx:06d}", part)

    def _complete(self, key, nparts):
        d = self._parts_dir(key)
        data = b"".join((d / f"{i:06d}").read_bytes() for i in range(nparts))
        self._store(key, data)
        self._drop_parts(key)

    def _drop_parts(self, key):
        d = self._parts_dir(key)
        if d.is_dir():
            for p in d.iterdir():
                p.unlink()
            d.rmdir()
