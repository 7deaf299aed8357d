"""Logical simulated clock in milliseconds (1 simulated second == 1000)."""

from __future__ import annotations

SECOND = 1000


class SimClock:
    def __init__(self, now_ms: float = 0):
        self.now_ms = now_ms

    def now(self) -> float:
        return self.now_ms

    def advance(self, ms: float) -> float:
        if ms < 0:
            raise ValueError("time does not run backwards")
        self.now_ms += ms
        return self.now_ms

    def advance_to(self, t: float) -> float:
        if t > self.now_ms:
            self.now_ms = t
        return self.now_ms
