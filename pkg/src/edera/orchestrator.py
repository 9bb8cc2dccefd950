"""protect-orchestrator: keeps the daemon set alive and exports metrics."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from .zone import ZoneState

BACKOFF_BASE_MS = 250
BACKOFF_FACTOR = 2
BACKOFF_CAP_MS = 8000


class Status(str, enum.Enum):
    HEALTHY = "healthy"
    DEGRADED = "degraded"
    FAILED = "failed"


@dataclass(frozen=True)
class ServiceHealth:
    service: str
    status: Status
    restarts: int
    last_check: float


def backoff_delay(attempt: int) -> float:
    """Delay before restart number ``attempt + 1`` of a still-failing service."""
    return min(BACKOFF_BASE_MS * BACKOFF_FACTOR ** max(attempt - 1, 0), BACKOFF_CAP_MS)


@dataclass
class _Service:
    name: str
    probe: Callable[[], bool]
    restart: Callable[[], object]
    restarts: int = 0
    attempt: int = 0
    next_restart_at: Optional[float] = None
    status: Status = Status.HEALTHY
    last_check: float = 0.0
    restart_times: list[float] = field(default_factory=list)


class Orchestrator:
    def __init__(self):
        self._services: dict[str, _Service] = {}
        self.daemon = None
        self.proxy = None
        self.cri = None

    def register(self, name: str, probe: Callable[[], bool], restart: Callable[[], object]) -> None:
        self._services[name] = _Service(name, probe, restart)

    @classmethod
    def for_stack(cls, daemon, proxy=None, cri=None) -> "Orchestrator":
        """Supervise the standard services; their ``alive`` flags are the probes."""
        orch = cls()
        orch.daemon, orch.proxy, orch.cri = daemon, proxy, cri
        orch.register("protect-daemon", lambda: daemon.available, daemon.restart)
        if proxy is not None:
            orch.register("protect-network", lambda: proxy.alive, lambda: setattr(proxy, "alive", True))
        if cri is not None:
            orch.register("protect-cri", lambda: cri.alive, lambda: setattr(cri, "alive", True))
        return orch

    def health_sweep(self, now: float) -> list[ServiceHealth]:
        """Probe every service; restart failed ones on the backoff schedule.

        A failing service is restarted at once on first detection, then at
        250, 500, 1000 ... ms (capped at 8 s) while it keeps failing.
        """
        out = []
        for name in sorted(self._services):
            svc = self._services[name]
            svc.last_check = now
            try:
                ok = bool(svc.probe())
            except Exception:  # noqa: BLE001 - a crashing probe is a failed probe
                ok = False
            if ok:
                svc.status = Status.HEALTHY
                svc.attempt = 0
                svc.next_restart_at = None
            else:
                svc.status = Status.FAILED
                if svc.next_restart_at is None or now >= svc.next_restart_at:
                    try:
                        svc.restart()
                    except Exception:  # noqa: BLE001
                        pass
                    svc.restarts += 1
                    svc.attempt += 1
                    svc.restart_times.append(now)
                    svc.next_restart_at = now + backoff_delay(svc.attempt)
                    svc.status = Status.DEGRADED
            out.append(ServiceHealth(name, svc.status, svc.restarts, now))
        return out

    def restarts(self, name: str) -> int:
        return self._services[name].restarts

    def restart_times(self, name: str) -> list[float]:
        return list(self._services[name].restart_times)

    # -- metrics ---------------------------------------------------------

    def render_metrics(self) -> str:
        return render_metrics(self.daemon, self.proxy, {n: s.restarts for n, s in self._services.items()})


def _line(name: str, labels: dict[str, str], value) -> tuple[str, str, str]:
    lab = ",".join(f'{k}="{v}"' for k, v in sorted(labels.items()))
    text = f"{name}{{{lab}}} {value}" if lab else f"{name} {value}"
    return name, lab, text


def render_metrics(daemon=None, proxy=None, restarts: Optional[dict[str, int]] = None) -> str:
    """Plain-text exposition, one ``name{labels} value`` per line.

    Lines are ordered by metric name, then label string, so identical state
    renders to identical bytes.
    """
    lines = []
    if daemon is not None:
        counts = {s: 0 for s in ZoneState}
        for rec in daemon.records.values():
            counts[rec.state] += 1
        for state, n in counts.items():
            lines.append(_line("edera_zones", {"state": state.value}, n))
        hv = daemon.hv
        lines.append(_line("edera_ledger_free_pages", {}, hv.free_pages))
        lines.append(_line("edera_ledger_total_pages", {}, hv.host.page_count))
        lines.append(_line("edera_ledger_free_cpus", {}, hv.free_cpus))
        lines.append(_line("edera_ledger_total_cpus", {}, hv.host.cpu_count))
    if proxy is not None:
        snap = proxy.snapshot_counters()
        t = snap.total
        lines.append(_line("edera_net_packets_seen_total", {}, t.seen_packets))
        lines.append(_line("edera_net_packets_delivered_total", {}, t.delivered_packets))
        lines.append(_line("edera_net_packets_dropped_total", {}, t.dropped_packets))
        lines.append(_line("edera_net_bytes_seen_total", {}, t.seen_bytes))
        lines.append(_line("edera_net_bytes_delivered_total", {}, t.delivered_bytes))
        lines.append(_line("edera_net_bytes_dropped_total", {}, t.dropped_bytes))
        for zone, c in snap.per_zone.items():
            lines.append(_line("edera_net_zone_packets_seen_total", {"zone": zone}, c.seen_packets))
            lines.append(_line("edera_net_zone_packets_delivered_total", {"zone": zone}, c.delivered_packets))
            lines.append(_line("edera_net_zone_packets_dropped_total", {"zone": zone}, c.dropped_packets))
        for reason, n in snap.drops_by_reason.items():
            lines.append(_line("edera_net_drops_total", {"reason": reason}, n))
    for svc, n in (restarts or {}).items():
        lines.append(_line("edera_service_restarts_total", {"service": svc}, n))
    lines.sort(key=lambda l: (l[0], l[1]))
    return "".join(text + "\n" for _, _, text in lines)
