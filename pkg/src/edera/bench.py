"""Startup-latency harness: cold zone creation versus warm-zone activation."""

from __future__ import annotations

import math
import statistics
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .clock import LogicalClock, WallClock
from .daemon import DaemonConfig, ZoneDaemon
from .hv import HostConfig
from .zone import ZoneSpec

# Published startup times (ms) measured on real hypervisors. Reference only;
# nothing here is ever compared against local measurements.
PUBLISHED_STARTUP_MS: tuple[tuple[str, float], ...] = (
    ("Docker", 177.4),
    ("Docker (bare metal)", 203.8),
    ("gVisor", 281.8),
    ("Edera-PV", 765.8),
    ("Kata Containers", 1934.2),
    ("Edera-PVH", 968.6),
)

KERNEL = "ghcr.io/edera-dev/linux-kernel:latest"
BENCH_MEMORY_MIB = 600


@dataclass(frozen=True)
class BenchReport:
    scenario: str
    runs: int
    samples_ms: tuple[float, ...]
    mean_ms: float
    stderr_ms: float
    clock: str
    reference: tuple[tuple[str, float], ...] = PUBLISHED_STARTUP_MS


def mean_stderr(samples: list[float]) -> tuple[float, float]:
    if len(samples) < 2:
        raise ValueError("need at least two runs for a standard error")
    return statistics.fmean(samples), statistics.stdev(samples) / math.sqrt(len(samples))


def bench_startup(
    runs: int = 5,
    warm: bool = False,
    clock: str = "wall",
    config: Optional[DaemonConfig] = None,
    store_dir: Optional[Path] = None,
) -> BenchReport:
    """Time create-to-first-heartbeat (cold) or activate-to-heartbeat (warm).

    Each run uses the same host and zone shape; teardown is untimed.
    """
    if runs < 2:
        raise ValueError("runs must be >= 2")
    clk = WallClock() if clock == "wall" else LogicalClock(metered=True)
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(store_dir or tmp)
        cfg = config or DaemonConfig(host=HostConfig.from_mib(8, 16384))
        if cfg.store_path is None:
            cfg = DaemonConfig(**{**cfg.__dict__, "store_path": base / "bench-store.log"})
        daemon = ZoneDaemon(cfg, clock=clk)
        samples: list[float] = []
        try:
            for _ in range(runs):
                if warm:
                    zone = daemon.create_zone(ZoneSpec(KERNEL, 0, 0), warm=True)
                    t0 = clk.now()
                    daemon.activate_zone(zone.id, 1, BENCH_MEMORY_MIB)
                    samples.append(clk.now() - t0)
                else:
                    t0 = clk.now()
                    zone = daemon.create_zone(ZoneSpec(KERNEL, BENCH_MEMORY_MIB, 1))
                    samples.append(clk.now() - t0)
                daemon.destroy_zone(zone.id)
        finally:
            daemon.close()
    mean, err = mean_stderr(samples)
    name = "warm-activation" if warm else "cold-creation"
    return BenchReport(name, runs, tuple(samples), mean, err, clk.label)


def format_report(report: BenchReport) -> str:
    unit = "ms" if report.clock == "wall" else "logical ms"
    out = [
        f"scenario: {report.scenario}",
        f"clock: {report.clock}",
        f"runs: {report.runs}",
        "samples: " + ", ".join(f"{s:.3f}" for s in report.samples_ms),
        f"mean: {report.mean_ms:.3f} {unit} +/- {report.stderr_ms:.3f} (stderr)",
        "published reference (not measured here):",
    ]
    for name, ms in sorted(report.reference, key=lambda r: r[1]):
        out.append(f"  {name:<22} {ms:>7.1f} ms")
    return "\n".join(out) + "\n"
