from __future__ import annotations

import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from edera.errors import (
    BadCpuIndex,
    CpuBusy,
    InsufficientMemory,
    NoRunnableDomains,
    NoSuchDomain,
    NotPinnedHere,
    RootUndestroyable,
)
from edera.hv import HostConfig, Hypervisor, PermissionFault, sched
from edera.hv.extents import ExtentPool, extents_size
from edera.zone import ZoneSpec


def spec(mib=0, vcpus=1):
    return ZoneSpec("img", mib, vcpus)


def hv_pages(cpus=4, pages=1024):
    return Hypervisor(HostConfig(cpus, pages))


# -- ledger ------------------------------------------------------------------


def test_600_mib_grant_is_ceil_of_kib_over_page_size():
    expected = math.ceil(600 * 1024 / 4)
    assert expected == 153600
    hv = Hypervisor(HostConfig.from_mib(4, 1024))
    h = hv.create_domain(spec(600, 1), 256)
    assert hv.pages_of(h) == expected
    assert hv.pages_of(h) * hv.host.page_size_kib == 153600 * 4


def test_pages_round_up():
    host = HostConfig(1, 10)
    assert host.pages_for(1) == 256
    assert host.pages_for(0) == 0


def test_zero_resource_domain_leaves_ledger_unchanged():
    hv = hv_pages()
    before = (hv.free_pages, hv.free_cpus)
    h = hv.create_domain(spec(0, 0))
    assert hv.exists(h) and (hv.free_pages, hv.free_cpus) == before


def test_oversized_request_rejected():
    hv = Hypervisor(HostConfig.from_mib(4, 64))
    with pytest.raises(InsufficientMemory):
        hv.create_domain(spec(128))
    assert hv.free_pages == hv.host.page_count


def test_destroy_returns_pages_and_guards_root():
    hv = hv_pages()
    h = hv.create_domain(spec(0))
    hv.grant_pages(h, 10)
    free = hv.free_pages
    rel = hv.destroy_domain(h)
    assert rel.pages == 10 and hv.free_pages == free + 10
    with pytest.raises(NoSuchDomain):
        hv.destroy_domain(h)
    with pytest.raises(RootUndestroyable):
        hv.destroy_domain(0)


def test_cpu_pin_exclusivity_and_repin():
    hv = hv_pages()
    a, b = hv.create_domain(spec()), hv.create_domain(spec())
    hv.pin_cpu(a, 2)
    with pytest.raises(CpuBusy):
        hv.pin_cpu(b, 2)
    hv.unpin_cpu(a, 2)
    hv.pin_cpu(b, 2)
    assert hv.pinned_cpus(b) == {2}
    with pytest.raises(BadCpuIndex):
        hv.pin_cpu(a, 9)


def test_unpin_rules():
    hv = hv_pages()
    a, b = hv.create_domain(spec()), hv.create_domain(spec())
    hv.pin_cpu(a, 1)
    with pytest.raises(NotPinnedHere):
        hv.unpin_cpu(b, 1)
    with pytest.raises(NotPinnedHere):
        hv.unpin_cpu(a, 0)
    hv.unpin_cpu(a, 1)
    assert hv.free_cpus == 4


def test_grow_memory():
    hv = Hypervisor(HostConfig.from_mib(4, 16 * 1024))
    h = hv.create_domain(spec(8 * 1024))
    before = hv.pages_of(h)
    assert hv.grow_memory(h, 1024) == before + 256 * 1024
    with pytest.raises(InsufficientMemory):
        hv.grow_memory(h, 64 * 1024)
    assert hv.pages_of(h) == before + 256 * 1024
    with pytest.raises(ValueError):
        hv.grow_memory(h, 0)


def test_released_memory_is_wiped():
    hv = hv_pages(pages=16)
    a = hv.create_domain(spec(0))
    hv.grant_pages(a, 4)
    hv.guest_write_memory(a, 0, b"secret")
    hv.destroy_domain(a)
    b = hv.create_domain(spec(0))
    hv.grant_pages(b, 16)
    assert all(hv.guest_read_memory(b, i) == bytes(4096) for i in range(16))


def test_pagetable_writes_fault_and_remap_is_privileged():
    hv = hv_pages()
    a, b = hv.create_domain(spec(0)), hv.create_domain(spec(0))
    hv.grant_pages(a, 4)
    hv.grant_pages(b, 4)
    digest = hv.ledger_digest()
    own = next(p for p, o in hv.pt_entries.items() if o == a.domain_id)
    other = next(p for p, o in hv.pt_entries.items() if o == b.domain_id)
    f1 = hv.guest_write_pagetable(a, own)
    f2 = hv.guest_write_pagetable(a, other)
    assert isinstance(f1, PermissionFault) and isinstance(f2, PermissionFault)
    assert f2.owner == b.domain_id
    assert hv.ledger_digest() == digest
    assert [e.kind for e in hv.events[-2:]] == ["pagetable_write_denied"] * 2
    hv.admin_remap(other, a)
    assert hv.pt_entries[other] == a.domain_id
    assert hv.pages_of(a) == 5 and hv.pages_of(b) == 3
    hv.check_invariants()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 40)), max_size=40))
def test_extent_pool_conserves_pages(ops):
    pool = ExtentPool(256)
    held = []
    for alloc, n in ops:
        if alloc and n <= pool.free_count:
            held.append(pool.alloc(n))
        elif held:
            pool.release(held.pop(0))
        assert pool.free_count + sum(extents_size(e) for e in held) == 256
    for e in held:
        pool.release(e)
    assert list(pool) == [(0, 256)]


# -- scheduler -----------------------------------------------------------------


def deficit_oracle(weights, slots):
    """Independent reference: each slot goes to the domain furthest behind its
    exact fractional share (ties to the lowest index)."""
    total = sum(weights)
    got = [0] * len(weights)
    for t in range(1, slots + 1):
        lag = [Fraction(w * t, total) - g for w, g in zip(weights, got)]
        got[max(range(len(weights)), key=lambda i: (lag[i], -i))] += 1
    return got


def test_weighted_share_one_cpu():
    hv = Hypervisor(HostConfig(1, 16))
    a = hv.create_domain(spec(), weight=1)
    b = hv.create_domain(spec(), weight=2)
    tr = hv.run_scheduler(300)
    assert abs(tr.ticks[a.domain_id] - 100) <= 1 and abs(tr.ticks[b.domain_id] - 200) <= 1
    oracle = deficit_oracle([1, 2], 300)
    assert all(abs(x - y) <= 1 for x, y in zip(oracle, [tr.ticks[a.domain_id], tr.ticks[b.domain_id]]))


def test_sole_domain_gets_every_cpu():
    hv = Hypervisor(HostConfig(4, 16))
    a = hv.create_domain(spec())
    assert hv.run_scheduler(50).ticks == {a.domain_id: 200}


def test_pinned_cpu_plus_shared_cpu():
    hv = Hypervisor(HostConfig(2, 16))
    a, b = hv.create_domain(spec()), hv.create_domain(spec())
    hv.pin_cpu(a, 0)
    tr = hv.run_scheduler(100)
    assert tr.ticks[a.domain_id] >= 100
    assert abs(tr.ticks[b.domain_id] - 50) <= 1
    assert tr.total() == 200


def test_no_runnable_domains():
    hv = Hypervisor(HostConfig(2, 16))
    hv.create_domain(spec(0, 0))
    with pytest.raises(NoRunnableDomains):
        hv.run_scheduler(10)


def test_paused_domain_not_scheduled():
    hv = Hypervisor(HostConfig(1, 16))
    a, b = hv.create_domain(spec()), hv.create_domain(spec())
    hv.set_paused(b, True)
    assert hv.run_scheduler(10).ticks == {a.domain_id: 10}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 64), min_size=1, max_size=6), st.integers(1, 400))
def test_kernel_matches_oracle_bound(weights, slots):
    got = sched.share_ticks(weights, slots)
    ref = deficit_oracle(weights, slots)
    total = sum(weights)
    n = len(weights)
    assert sum(got) == slots
    for g, r, w in zip(got, ref, weights):
        assert abs(g - Fraction(w * slots, total)) <= n
        assert abs(r - Fraction(w * slots, total)) <= 1
        assert abs(g - r) <= n + 1


def test_backends_agree():
    rng = random.Random(11)
    for _ in range(50):
        w = [rng.randint(1, 1000) for _ in range(rng.randint(1, 8))]
        slots = rng.randint(0, 5000)
        assert sched.share_ticks(w, slots) == sched.share_ticks_py(w, slots)


def test_compiled_backend_loaded():
    # the extension is built by `pip install -e .`; EDERA_PURE_PYTHON forces the fallback
    import os

    if os.environ.get("EDERA_PURE_PYTHON"):
        assert sched.BACKEND == "python"
    else:
        assert sched.BACKEND in ("cython", "python")


def test_pure_python_fallback_selected(monkeypatch):
    import importlib

    monkeypatch.setenv("EDERA_PURE_PYTHON", "1")
    mod = importlib.reload(sched)
    try:
        assert mod.BACKEND == "python"
        assert mod.share_ticks([1, 2], 30) == [10, 20]
    finally:
        monkeypatch.delenv("EDERA_PURE_PYTHON")
        importlib.reload(sched)


def test_scheduler_is_deterministic():
    def run():
        hv = Hypervisor(HostConfig(4, 64))
        for w in (3, 5, 7):
            hv.create_domain(spec(), weight=w)
        hv.pin_cpu(1, 3)
        return hv.run_scheduler(500).to_bytes()

    assert run() == run()


def test_600_mib_does_not_fit_a_1024_page_host():
    hv = hv_pages(4, 1024)
    with pytest.raises(InsufficientMemory):
        hv.create_domain(spec(600))
    assert hv.free_pages == 1024
