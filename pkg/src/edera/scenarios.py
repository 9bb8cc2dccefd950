"""Escape-analog scenarios.

Each scenario stages one class of container-escape attempt against a fresh
in-memory stack and asserts that its effects stay inside the attacking zone:

* ``pagetable-write``: a guest writes to page-table pages (its own and a
  neighbour's); every write faults and the resource ledger is untouched.
* ``fd-namespace``: a zone holding a leaked daemon store handle tries to read
  and overwrite keys outside its own ``zone/<uuid>/`` area.
* ``driver-fault``: a driver zone is compromised while app zones use the
  device; only the driver zone goes away.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .clock import LogicalClock
from .daemon import DaemonConfig
from .devices import STATUS_DRIVER_UNAVAILABLE, DeviceMode
from .errors import DriverUnavailable, NamespaceViolation, NoSuchKey, ScenarioFailed
from .hv import HostConfig, PermissionFault
from .idm import Tag, tlv_get
from .stack import Stack, build_stack
from .zone import Role, ZoneSpec, ZoneState, seeded_id_generator

KERNEL = "ghcr.io/edera-dev/linux-kernel:latest"


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    checks: list[tuple[str, bool]] = field(default_factory=list)
    error: str = ""
    elapsed_s: float = 0.0


class _Checks:
    def __init__(self):
        self.items: list[tuple[str, bool]] = []

    def __call__(self, ok: bool, what: str) -> None:
        self.items.append((what, bool(ok)))
        if not ok:
            raise ScenarioFailed(what)


def _stack() -> Stack:
    cfg = DaemonConfig(host=HostConfig.from_mib(8, 4096), kernel_image_kib=64, fsync=False)
    return build_stack(cfg, clock=LogicalClock(), id_factory=seeded_id_generator(7))


def pagetable_write(check: _Checks) -> None:
    st = _stack()
    d = st.daemon
    a = d.create_zone(ZoneSpec(KERNEL, 16, 1))
    b = d.create_zone(ZoneSpec(KERNEL, 16, 1))
    d.hv.guest_write_memory(b.domain, 0, b"secret-of-b")
    digest = d.hv.ledger_digest()
    pt = d.hv.pt_entries
    events_before = len(d.hv.events)
    b_pages = sorted(p for p, owner in pt.items() if owner == b.domain)
    a_pages = sorted(p for p, owner in pt.items() if owner == a.domain)
    targets = a_pages[:4] + b_pages[:4] + [0, d.hv.host.page_count - 1]
    faults = [d.guest_pagetable_write(a.id, p) for p in targets]
    check(all(isinstance(f, PermissionFault) for f in faults), "every guest page-table write faults")
    check(d.hv.ledger_digest() == digest, "ledger hash unchanged after guest writes")
    check(d.hv.pt_entries == pt, "page ownership unchanged after guest writes")
    check(len(d.hv.events) == events_before + len(targets), "each attempt is logged as an event")
    check(d.hv.guest_read_memory(b.domain, 0).startswith(b"secret-of-b"), "neighbour memory intact")
    d.pump()
    observed = [e for e in d.zone_events(a.id) if e.kind.name == "PAGETABLE_FAULT_OBSERVED"]
    check(len(observed) == len(targets), "faults reported over IDM by the init agent")
    # privileged path: the root zone can still remap through the hypervisor API
    free_page = next(iter(d.hv._pool))[0]
    d.hv.admin_remap(free_page, a.domain)
    check(d.hv.pt_entries.get(free_page) == a.domain, "administrative remap via hypervisor API succeeds")
    d.hv.check_invariants()


def fd_namespace(check: _Checks) -> None:
    st = _stack()
    d = st.daemon
    a = d.create_zone(ZoneSpec(KERNEL, 16, 1))
    b = d.create_zone(ZoneSpec(KERNEL, 16, 1))
    d.zone_store_handle(b.id).put(f"zone/{b.id}/data", b"b-private")
    protected = {k: d.kv_get(k) for k in d.kv_list() if not k.startswith(f"zone/{a.id}/")}

    leaked = d.zone_store_handle(a.id)
    attempts = [
        lambda: leaked.get(f"zone/{b.id}"),
        lambda: leaked.get(f"zone/{b.id}/data"),
        lambda: leaked.get("host/config"),
        lambda: leaked.get(f"zone/{a.id}"),
        lambda: leaked.put(f"zone/{b.id}", b"{}"),
        lambda: leaked.put(f"zone/{a.id}", b'{"state":"active"}'),
        lambda: leaked.put("host/config", b"{}"),
        lambda: leaked.list("zone/"),
        lambda: leaked.list(""),
        lambda: leaked.delete(f"zone/{b.id}/data"),
    ]
    denied = 0
    for attempt in attempts:
        try:
            attempt()
        except NamespaceViolation:
            denied += 1
    check(denied == len(attempts), "every cross-prefix read/write is denied")
    # a key that merely looks like a traversal is just an opaque key inside the scope
    leaked.put(f"zone/{a.id}/../{b.id}/data", b"x")
    check(d.kv_get(f"zone/{b.id}/data") == b"b-private", "path-like keys cannot escape the prefix")
    leaked.put(f"zone/{a.id}/scratch", b"ok")
    try:
        own = leaked.get(f"zone/{a.id}/scratch")
    except NoSuchKey:
        own = None
    check(own == b"ok", "zone can use its own namespace")
    after = {k: d.kv_get(k) for k in d.kv_list() if not k.startswith(f"zone/{a.id}/")}
    check(after == protected, "daemon store outside the zone's prefix unchanged")


def driver_fault(check: _Checks) -> None:
    st = _stack()
    d = st.daemon
    apps = [d.create_zone(ZoneSpec(KERNEL, 16, 1)) for _ in range(3)]
    att = d.attach_device("gpu0", DeviceMode.PARTITIONED, ZoneSpec(KERNEL, 32, 1, Role.DRIVER), slices=2)
    d.bind_slice("gpu0", 0, apps[0].id)
    d.bind_slice("gpu0", 1, apps[1].id)
    d.device_request(apps[0].id, "gpu0", "write", 0, b"tensor")
    check(d.device_request(apps[0].id, "gpu0", "read", 0, length=6) == b"tensor", "device works before fault")
    root_ok = d.hv.exists(0)
    # queue a request from the second client that is still in flight when the driver dies
    inflight = d.agent(apps[1].id)
    sid = inflight.request_device(
        [(Tag.DEVICE_ID, b"gpu0"), (Tag.OP, b"read"), (Tag.OFFSET, bytes(4)), (Tag.LENGTH, b"\x00\x00\x00\x04")]
    )
    report = d.inject_driver_fault("gpu0")
    d.pump()  # client flushes, daemon routes and answers
    d.pump()  # client drains the reply
    d.supervise()
    reply = inflight.device_replies.pop(sid, None)
    check(reply is not None and tlv_get(reply, Tag.STATUS) == STATUS_DRIVER_UNAVAILABLE,
          "in-flight request fails with DriverUnavailable")
    check(report.changed() == [att.driver_zone], "fault changes exactly the driver zone")
    check(d.get(att.driver_zone).state is ZoneState.DEPROVISIONED, "driver zone deprovisioned")
    check(all(d.get(z.id).state is ZoneState.ACTIVE for z in apps), "all app zones still active")
    check(root_ok and d.hv.exists(0), "hypervisor root domain intact")
    try:
        d.device_request(apps[0].id, "gpu0", "read", 0, length=6)
        check(False, "client request after fault fails")
    except DriverUnavailable:
        check(True, "client request after fault fails with DriverUnavailable")
    check(d.exec(apps[0].id, ["true"]).exit_code == 0, "client zone unaffected by driver fault")
    att2 = d.attach_device("gpu0", DeviceMode.PARTITIONED, ZoneSpec(KERNEL, 32, 1, Role.DRIVER), slices=2)
    d.bind_slice("gpu0", 0, apps[2].id)
    check(d.device_request(apps[2].id, "gpu0", "read", 0, length=6) == bytes(6), "re-attached device serves zeroed memory")
    check(att2.driver_zone != att.driver_zone, "re-attach creates a new driver zone")
    d.hv.check_invariants()
    d.check_coherence()


SCENARIOS: dict[str, Callable[[_Checks], None]] = {
    "pagetable-write": pagetable_write,
    "fd-namespace": fd_namespace,
    "driver-fault": driver_fault,
}


def run_scenario(name: str) -> ScenarioResult:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)} or all")
    check = _Checks()
    t0 = time.perf_counter()
    try:
        SCENARIOS[name](check)
        return ScenarioResult(name, True, check.items, elapsed_s=time.perf_counter() - t0)
    except ScenarioFailed as e:
        return ScenarioResult(name, False, check.items, str(e), time.perf_counter() - t0)


def run_all() -> list[ScenarioResult]:
    return [run_scenario(n) for n in SCENARIOS]
