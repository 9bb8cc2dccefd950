"""Wires the four control-plane services together."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .cri import CriShim
from .daemon import DaemonConfig, ZoneDaemon
from .net import NetProxy
from .orchestrator import Orchestrator
from .zone import ZoneId


@dataclass
class Stack:
    daemon: ZoneDaemon
    proxy: NetProxy
    cri: CriShim
    orchestrator: Orchestrator

    def step(self, now: Optional[float] = None) -> None:
        """One pass of the supervisory loop."""
        now = self.daemon.clock.now() if now is None else now
        self.daemon.pump(now)
        self.daemon.supervise(now)
        self.orchestrator.health_sweep(now)
        if self.daemon.available and self.cri.alive:
            self.cri.tick(now)

    def close(self) -> None:
        self.daemon.close()


def build_stack(
    config: Optional[DaemonConfig] = None,
    clock=None,
    id_factory: Optional[Callable[[], ZoneId]] = None,
) -> Stack:
    holder: dict[str, ZoneDaemon] = {}
    proxy = NetProxy(lambda z: holder["d"].state_of(z))
    daemon = ZoneDaemon(config, clock=clock, id_factory=id_factory, proxy=proxy)
    holder["d"] = daemon
    for rec in daemon.list_zones(include_tombstones=False):
        if rec.state.value == "quarantined":
            proxy.set_quarantine(rec.id, True)
    cri = CriShim(daemon)
    return Stack(daemon, proxy, cri, Orchestrator.for_stack(daemon, proxy, cri))
