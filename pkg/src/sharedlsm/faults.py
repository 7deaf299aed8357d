"""Named crash points for fault-injection tests.

Protocol code calls ``points.hit("name")`` at every step boundary.  A test arms
one name; reaching it raises :class:`SimulatedCrash`.  Every name reached is
recorded, which lets enumeration tests discover the full set of boundaries by
running once unarmed.
"""

from __future__ import annotations

from .errors import SimulatedCrash


class CrashPoints:
    def __init__(self, armed: str | None = None):
        self.armed = armed
        self.reached: list[str] = []

    def hit(self, name: str) -> None:
        self.reached.append(name)
        if self.armed == name:
            self.armed = None
            raise SimulatedCrash(name)

    def arm(self, name: str | None) -> None:
        self.armed = name


def points(cp: CrashPoints | None) -> CrashPoints:
    return cp if cp is not None else CrashPoints()
