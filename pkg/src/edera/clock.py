"""Injectable clocks. All times are milliseconds."""

from __future__ import annotations

import time


class WallClock:
    label = "wall"

    def now(self) -> float:
        return time.monotonic() * 1000.0

    def charge(self, units: int = 1) -> None:
        pass


class LogicalClock:
    """Manually advanced clock for deterministic runs.

    With ``metered=True`` every unit of control-plane work reported through
    :meth:`charge` advances time by ``unit_ms``; benchmarks use this to get
    reproducible latencies that count work instead of wall time.
    """

    label = "logical"

    def __init__(self, start: float = 0.0, metered: bool = False, unit_ms: float = 1.0):
        self.t = float(start)
        self.metered = metered
        self.unit_ms = unit_ms

    def now(self) -> float:
        return self.t

    def advance(self, ms: float) -> float:
        if ms < 0:
            raise ValueError("time does not run backwards")
        self.t += ms
        return self.t

    def charge(self, units: int = 1) -> None:
        if self.metered:
            self.t += units * self.unit_ms
