"""Deterministic simulated type-1 hypervisor.

Models the resource side of the hypervisor only: domains, exclusive CPU
pins, a page ledger with read-only guest page-table views, and a
credit-based proportional-share vCPU scheduler. Mutating calls are expected
to be serialized by a single owner (the zone daemon).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

from ..errors import (
    BadCpuIndex,
    CpuBusy,
    InsufficientCpus,
    InsufficientMemory,
    NoRunnableDomains,
    NoSuchDomain,
    NotPinnedHere,
    RootUndestroyable,
)
from ..zone import ZoneSpec
from . import sched
from .extents import Extent, ExtentPool, extent_pages, extents_size, guest_to_hw, remove_page

ROOT_DOMAIN = 0
DEFAULT_WEIGHT = 256


@dataclass(frozen=True)
class HostConfig:
    cpu_count: int
    page_count: int
    page_size_kib: int = 4

    def __post_init__(self):
        if self.cpu_count < 1 or self.page_count < 1 or self.page_size_kib < 1:
            raise ValueError("host needs at least one cpu and one page")

    @classmethod
    def from_mib(cls, cpu_count: int, memory_mib: int, page_size_kib: int = 4) -> "HostConfig":
        return cls(cpu_count, memory_mib * 1024 // page_size_kib, page_size_kib)

    def pages_for(self, mib: int) -> int:
        return math.ceil(mib * 1024 / self.page_size_kib)


@dataclass(frozen=True)
class DomainHandle:
    domain_id: int
    weight: int = DEFAULT_WEIGHT


@dataclass(frozen=True)
class PermissionFault:
    """Result of any guest attempt to write a page-table page."""

    domain_id: int
    page: int
    owner: Optional[int]


@dataclass(frozen=True)
class HvEvent:
    kind: str
    domain_id: int
    detail: str


@dataclass(frozen=True)
class Released:
    domain_id: int
    pages: int
    cpus: tuple[int, ...]


@dataclass(frozen=True)
class SchedTrace:
    window: int
    cpu_count: int
    ticks: dict[int, int]
    idle: int = 0

    def total(self) -> int:
        return sum(self.ticks.values())

    def to_bytes(self) -> bytes:
        doc = {
            "window": self.window,
            "cpu_count": self.cpu_count,
            "ticks": {str(k): v for k, v in sorted(self.ticks.items())},
            "idle": self.idle,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class _Domain:
    domain_id: int
    weight: int
    vcpus: int
    extents: list[Extent] = field(default_factory=list)
    pinned: set[int] = field(default_factory=set)
    written: set[int] = field(default_factory=set)
    paused: bool = False

    @property
    def pages(self) -> int:
        return extents_size(self.extents)


DomainRef = Union[DomainHandle, int]


class Hypervisor:
    def __init__(self, host: HostConfig):
        self.host = host
        self._pool = ExtentPool(host.page_count)
        self._cpu_pins: dict[int, Optional[int]] = {c: None for c in range(host.cpu_count)}
        self._domains: dict[int, _Domain] = {ROOT_DOMAIN: _Domain(ROOT_DOMAIN, DEFAULT_WEIGHT, 0)}
        self._next_id = 1
        self._page_data: dict[int, bytes] = {}
        self.events: list[HvEvent] = []

    # -- queries ---------------------------------------------------------

    @property
    def root(self) -> DomainHandle:
        return DomainHandle(ROOT_DOMAIN)

    @property
    def free_pages(self) -> int:
        return self._pool.free_count

    @property
    def free_cpus(self) -> int:
        return sum(1 for owner in self._cpu_pins.values() if owner is None)

    def domain_ids(self) -> list[int]:
        return sorted(self._domains)

    def exists(self, d: DomainRef) -> bool:
        return _id(d) in self._domains

    def handle(self, domain_id: int) -> DomainHandle:
        return DomainHandle(domain_id, self._get(domain_id).weight)

    def pages_of(self, d: DomainRef) -> int:
        return self._get(d).pages

    def pinned_cpus(self, d: DomainRef) -> set[int]:
        return set(self._get(d).pinned)

    def vcpus_of(self, d: DomainRef) -> int:
        return self._get(d).vcpus

    @property
    def cpu_grants(self) -> dict[int, Optional[int]]:
        return dict(self._cpu_pins)

    @property
    def page_grants(self) -> dict[int, int]:
        return {i: d.pages for i, d in self._domains.items()}

    @property
    def pt_entries(self) -> dict[int, int]:
        """Hardware page index -> owning domain (expanded view)."""
        out: dict[int, int] = {}
        for dom in self._domains.values():
            for page in extent_pages(dom.extents):
                out[page] = dom.domain_id
        return out

    def ledger_digest(self) -> str:
        doc = {
            "cpus": [self._cpu_pins[c] for c in range(self.host.cpu_count)],
            "domains": [
                [d.domain_id, d.weight, d.vcpus, d.extents, sorted(d.pinned)]
                for d in sorted(self._domains.values(), key=lambda d: d.domain_id)
            ],
            "free": list(self._pool),
        }
        return hashlib.sha256(json.dumps(doc, separators=(",", ":")).encode()).hexdigest()

    def check_invariants(self) -> None:
        granted = sum(d.pages for d in self._domains.values())
        assert granted + self._pool.free_count == self.host.page_count, "page conservation"
        seen: set[int] = set()
        for start, length in self._pool:
            span = set(range(start, start + length))
            assert not (span & seen), "free pool overlap"
            seen |= span
        for dom in self._domains.values():
            span = set(extent_pages(dom.extents))
            assert len(span) == dom.pages and not (span & seen), "page owned twice"
            seen |= span
            for cpu in dom.pinned:
                assert self._cpu_pins[cpu] == dom.domain_id, "pin bookkeeping"
        for cpu, owner in self._cpu_pins.items():
            if owner is not None:
                assert cpu in self._domains[owner].pinned, "pin bookkeeping"

    # -- lifecycle -------------------------------------------------------

    def create_domain(self, spec: ZoneSpec, weight: int = DEFAULT_WEIGHT, pin: bool = False) -> DomainHandle:
        if weight < 1:
            raise ValueError("weight must be positive")
        pages = self.host.pages_for(spec.memory_mib)
        if pages > self._pool.free_count:
            raise InsufficientMemory(f"need {pages} pages, {self._pool.free_count} free")
        if spec.vcpus > self.host.cpu_count:
            raise InsufficientCpus(f"{spec.vcpus} vcpus on a {self.host.cpu_count}-cpu host")
        free = [c for c in sorted(self._cpu_pins) if self._cpu_pins[c] is None]
        if pin and spec.vcpus > len(free):
            raise InsufficientCpus(f"need {spec.vcpus} unpinned cpus, {len(free)} free")
        dom = _Domain(self._next_id, weight, spec.vcpus)
        self._next_id += 1
        if pages:
            dom.extents = self._pool.alloc(pages)
        if pin:
            for cpu in free[: spec.vcpus]:
                self._cpu_pins[cpu] = dom.domain_id
                dom.pinned.add(cpu)
        self._domains[dom.domain_id] = dom
        return DomainHandle(dom.domain_id, weight)

    def destroy_domain(self, d: DomainRef) -> Released:
        if _id(d) == ROOT_DOMAIN:
            raise RootUndestroyable("domain 0 is the root zone")
        dom = self._get(d)
        self._wipe(dom, dom.extents)
        self._pool.release(dom.extents)
        for cpu in dom.pinned:
            self._cpu_pins[cpu] = None
        del self._domains[dom.domain_id]
        return Released(dom.domain_id, dom.pages, tuple(sorted(dom.pinned)))

    def set_vcpus(self, d: DomainRef, vcpus: int) -> None:
        if vcpus < 0:
            raise ValueError("vcpus must be non-negative")
        if vcpus > self.host.cpu_count:
            raise InsufficientCpus(f"{vcpus} vcpus on a {self.host.cpu_count}-cpu host")
        self._get(d).vcpus = vcpus

    def set_paused(self, d: DomainRef, paused: bool) -> None:
        self._get(d).paused = paused

    # -- cpus ------------------------------------------------------------

    def pin_cpu(self, d: DomainRef, cpu: int) -> None:
        dom = self._get(d)
        if not 0 <= cpu < self.host.cpu_count:
            raise BadCpuIndex(f"cpu {cpu} not in [0, {self.host.cpu_count})")
        owner = self._cpu_pins[cpu]
        if owner is not None and owner != dom.domain_id:
            raise CpuBusy(f"cpu {cpu} pinned to domain {owner}")
        self._cpu_pins[cpu] = dom.domain_id
        dom.pinned.add(cpu)

    def unpin_cpu(self, d: DomainRef, cpu: int) -> None:
        dom = self._get(d)
        if self._cpu_pins.get(cpu) != dom.domain_id:
            raise NotPinnedHere(f"cpu {cpu} is not pinned to domain {dom.domain_id}")
        self._cpu_pins[cpu] = None
        dom.pinned.discard(cpu)

    # -- memory ----------------------------------------------------------

    def grow_memory(self, d: DomainRef, additional_mib: int) -> int:
        if additional_mib <= 0:
            raise ValueError("additional_mib must be positive")
        return self.grant_pages(d, self.host.pages_for(additional_mib))

    def grant_pages(self, d: DomainRef, pages: int) -> int:
        """Add ``pages`` to a domain atomically; returns the new total."""
        dom = self._get(d)
        if pages > self._pool.free_count:
            raise InsufficientMemory(f"need {pages} pages, {self._pool.free_count} free")
        if pages:
            dom.extents.extend(self._pool.alloc(pages))
        return dom.pages

    def guest_write_memory(self, d: DomainRef, guest_page: int, data: bytes) -> None:
        dom = self._get(d)
        if len(data) > self.page_bytes:
            raise ValueError("write larger than one page")
        hw = guest_to_hw(dom.extents, guest_page)
        self._page_data[hw] = bytes(data).ljust(self.page_bytes, b"\0")
        dom.written.add(hw)

    def guest_read_memory(self, d: DomainRef, guest_page: int) -> bytes:
        dom = self._get(d)
        hw = guest_to_hw(dom.extents, guest_page)
        return self._page_data.get(hw, bytes(self.page_bytes))

    @property
    def page_bytes(self) -> int:
        return self.host.page_size_kib * 1024

    def guest_write_pagetable(self, d: DomainRef, page: int) -> PermissionFault:
        """Guest page tables are mapped read-only: every write faults.

        Nothing in the ledger changes; the attempt is logged as an event.
        """
        did = _id(d)
        owner = self._owner_of(page)
        self.events.append(HvEvent("pagetable_write_denied", did, f"page={page} owner={owner}"))
        return PermissionFault(did, page, owner)

    def admin_remap(self, page: int, to: DomainRef) -> None:
        """Privileged remap of one hardware page (root-zone path only)."""
        target = self._get(to)
        owner = self._owner_of(page)
        if owner is None:
            if not self._pool.take_page(page):
                raise IndexError(page)
        else:
            src = self._domains[owner]
            remove_page(src.extents, page)
            self._wipe(src, [(page, 1)])
        target.extents.append((page, 1))
        self.events.append(HvEvent("admin_remap", ROOT_DOMAIN, f"page={page} {owner}->{target.domain_id}"))

    # -- scheduling ------------------------------------------------------

    def runnable(self) -> list[int]:
        return [
            i
            for i, d in sorted(self._domains.items())
            if i != ROOT_DOMAIN and d.vcpus > 0 and not d.paused
        ]

    def run_scheduler(self, window_ticks: int) -> SchedTrace:
        """Simulate ``window_ticks`` quanta on every CPU.

        Pinned CPUs run only their owner; unpinned CPUs are shared among all
        runnable domains in proportion to weight. Credits start from zero
        on each call, so identical inputs give identical traces.
        """
        if window_ticks <= 0:
            raise ValueError("window_ticks must be positive")
        runnable = self.runnable()
        if not runnable:
            raise NoRunnableDomains("no runnable domains")
        ticks = {i: 0 for i in runnable}
        idle = 0
        shared = 0
        for owner in self._cpu_pins.values():
            if owner is None:
                shared += 1
            elif owner in ticks:
                ticks[owner] += window_ticks
            else:
                idle += window_ticks
        weights = [self._domains[i].weight for i in runnable]
        for i, n in zip(runnable, sched.share_ticks(weights, shared * window_ticks)):
            ticks[i] += n
        return SchedTrace(window_ticks, self.host.cpu_count, ticks, idle)

    # -- internals -------------------------------------------------------

    def _get(self, d: DomainRef) -> _Domain:
        try:
            return self._domains[_id(d)]
        except KeyError:
            raise NoSuchDomain(f"domain {_id(d)} does not exist") from None

    def _owner_of(self, page: int) -> Optional[int]:
        for dom in self._domains.values():
            for start, length in dom.extents:
                if start <= page < start + length:
                    return dom.domain_id
        return None

    def _wipe(self, dom: _Domain, extents: list[Extent]) -> None:
        for start, length in extents:
            for hw in [p for p in dom.written if start <= p < start + length]:
                self._page_data.pop(hw, None)
                dom.written.discard(hw)


def _id(d: DomainRef) -> int:
    return d.domain_id if isinstance(d, DomainHandle) else int(d)
