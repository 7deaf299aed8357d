"""Reference implementations the tests compare the package against.

Each is written independently of the code under test: a bitwise CRC-32, an
ARC cache transcribed from the original algorithm's pseudocode with plain
lists, and a multiversion map with linear scans.
"""

from __future__ import annotations


def bitwise_crc32(data: bytes) -> int:
    """CRC-32/ISO-HDLC one bit at a time (reflected poly 0xEDB88320)."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xEDB88320
            else:
                crc >>= 1
    return crc ^ 0xFFFFFFFF


def canonical_bytes(key: bytes, value: bytes, scn: int, tomb: bool) -> bytes:
    """Row serialization spelled out byte by byte."""
    out = bytearray()
    out += len(key).to_bytes(4, "big") + key
    out += len(value).to_bytes(4, "big") + value
    out += scn.to_bytes(8, "big")
    out.append(1 if tomb else 0)
    return bytes(out)


class ReferenceArc:
    """ARC with lists; index 0 is the LRU end, the last element the MRU end."""

    def __init__(self, c: int):
        self.c = c
        self.p = 0.0
        self.T1: list = []
        self.T2: list = []
        self.B1: list = []
        self.B2: list = []

    def _replace(self, x) -> None:
        if self.T1 and ((x in self.B2 and len(self.T1) == self.p) or len(self.T1) > self.p):
            self.B1.append(self.T1.pop(0))
        else:
            self.B2.append(self.T2.pop(0))

    def request(self, x) -> bool:
        # Case I: hit in T1 or T2
        if x in self.T1 or x in self.T2:
            (self.T1 if x in self.T1 else self.T2).remove(x)
            self.T2.append(x)
            return True
        # Case II: ghost hit in B1
        if x in self.B1:
            delta = 1 if len(self.B1) >= len(self.B2) else len(self.B2) / len(self.B1)
            self.p = min(self.p + delta, self.c)
            self._replace(x)
            self.B1.remove(x)
            self.T2.append(x)
            return False
        # Case III: ghost hit in B2
        if x in self.B2:
            delta = 1 if len(self.B2) >= len(self.B1) else len(self.B1) / len(self.B2)
            self.p = max(self.p - delta, 0)
            self._replace(x)
            self.B2.remove(x)
            self.T2.append(x)
            return False
        # Case IV: complete miss
        L1 = len(self.T1) + len(self.B1)
        L2 = len(self.T2) + len(self.B2)
        if L1 == self.c:
            if len(self.T1) < self.c:
                self.B1.pop(0)
                self._replace(x)
            else:
                self.T1.pop(0)
        elif L1 < self.c and L1 + L2 >= self.c:
            if L1 + L2 == 2 * self.c:
                self.B2.pop(0)
            self._replace(x)
        self.T1.append(x)
        return False


class MultiVersionMap:
    """key -> list of (scn, value or None for a delete); linear-scan reads."""

    def __init__(self):
        self.versions: dict[bytes, list[tuple[int, bytes | None]]] = {}

    def put(self, key: bytes, value: bytes | None, scn: int) -> None:
        self.versions.setdefault(key, []).append((scn, value))

    def latest(self, key: bytes, scn: int) -> tuple[int, bytes | None] | None:
        best = None
        for s, v in self.versions.get(key, []):
            if s <= scn and (best is None or s > best[0]):
                best = (s, v)
        return best

    def get(self, key: bytes, scn: int) -> bytes | None:
        best = self.latest(key, scn)
        return None if best is None else best[1]

    def visible(self, scn: int) -> list[tuple[bytes, bytes, int]]:
        """(key, value, commit scn) of every live key at ``scn``, key order."""
        out = []
        for key in sorted(self.versions):
            best = self.latest(key, scn)
            if best is not None and best[1] is not None:
                out.append((key, best[1], best[0]))
        return out

    def scan(self, scn: int) -> list[tuple[bytes, bytes]]:
        out = []
        for key in sorted(self.versions):
            v = self.get(key, scn)
            if v is not None:
                out.append((key, v))
        return out
