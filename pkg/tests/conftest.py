from __future__ import annotations

import pytest

from edera.clock import LogicalClock
from edera.daemon import DaemonConfig, ZoneDaemon
from edera.hv import HostConfig
from edera.stack import build_stack
from edera.zone import seeded_id_generator

KERNEL = "ghcr.io/edera-dev/linux-kernel:latest"


def small_config(**kw) -> DaemonConfig:
    base = dict(host=HostConfig.from_mib(8, 8192), kernel_image_kib=16, fsync=False)
    base.update(kw)
    return DaemonConfig(**base)


@pytest.fixture
def clock():
    return LogicalClock()


@pytest.fixture
def daemon(clock):
    d = ZoneDaemon(small_config(), clock=clock, id_factory=seeded_id_generator(1))
    yield d
    d.close()


@pytest.fixture
def stack(clock):
    st = build_stack(small_config(), clock=clock, id_factory=seeded_id_generator(2))
    yield st
    st.close()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
