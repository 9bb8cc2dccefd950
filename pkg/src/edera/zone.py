"""Zone domain types and the zone lifecycle state machine.

Everything in this module is plain data plus pure functions, so it can be
shared freely between the daemon, the CRI shim and the CLI.
"""

from __future__ import annotations

import enum
import random
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

from .errors import IllegalTransition

ZoneId = str


class Role(str, enum.Enum):
    WORKLOAD = "workload"
    DRIVER = "driver"
    ROOT = "root"


class ZoneState(str, enum.Enum):
    PROVISIONING = "provisioning"
    WARM = "warm"
    ACTIVE = "active"
    QUARANTINED = "quarantined"
    NOT_RESPONDING = "not_responding"
    DEPROVISIONED = "deprovisioned"


class LifecycleEvent(str, enum.Enum):
    BOOT_COMPLETE_WARM = "boot_complete_warm"
    BOOT_COMPLETE_ACTIVE = "boot_complete_active"
    ACTIVATE = "activate"
    QUARANTINE = "quarantine"
    RELEASE = "release"
    HEARTBEAT_TIMEOUT = "heartbeat_timeout"
    FAULT = "fault"
    DEPROVISION = "deprovision"


S, E = ZoneState, LifecycleEvent

TRANSITIONS: dict[tuple[ZoneState, LifecycleEvent], ZoneState] = {
    (S.PROVISIONING, E.BOOT_COMPLETE_WARM): S.WARM,
    (S.PROVISIONING, E.BOOT_COMPLETE_ACTIVE): S.ACTIVE,
    (S.PROVISIONING, E.DEPROVISION): S.DEPROVISIONED,
    (S.WARM, E.ACTIVATE): S.ACTIVE,
    (S.WARM, E.DEPROVISION): S.DEPROVISIONED,
    (S.ACTIVE, E.QUARANTINE): S.QUARANTINED,
    (S.ACTIVE, E.HEARTBEAT_TIMEOUT): S.NOT_RESPONDING,
    (S.ACTIVE, E.FAULT): S.NOT_RESPONDING,
    (S.ACTIVE, E.DEPROVISION): S.DEPROVISIONED,
    (S.QUARANTINED, E.RELEASE): S.ACTIVE,
    (S.QUARANTINED, E.HEARTBEAT_TIMEOUT): S.NOT_RESPONDING,
    (S.QUARANTINED, E.FAULT): S.NOT_RESPONDING,
    (S.QUARANTINED, E.DEPROVISION): S.DEPROVISIONED,
    (S.NOT_RESPONDING, E.DEPROVISION): S.DEPROVISIONED,
}

del S, E

#: Successor sets per state, derived from the event table.
LEGAL_SUCCESSORS: dict[ZoneState, frozenset[ZoneState]] = {
    s: frozenset(dst for (src, _), dst in TRANSITIONS.items() if src is s) for s in ZoneState
}


def transition(current: ZoneState, event: LifecycleEvent) -> ZoneState:
    """Return the successor of ``current`` under ``event``.

    Raises :class:`IllegalTransition` for any pair outside the table.
    """
    try:
        return TRANSITIONS[(current, event)]
    except KeyError:
        raise IllegalTransition(current, event) from None


def new_zone_id(rng: Optional[random.Random] = None) -> ZoneId:
    """Fresh random 128-bit zone identifier in 8-4-4-4-12 lowercase hex.

    Pass a seeded :class:`random.Random` for reproducible ids in tests.
    """
    if rng is None:
        return str(uuid.uuid4())
    return str(uuid.UUID(int=rng.getrandbits(128), version=4))


def seeded_id_generator(seed: int) -> Callable[[], ZoneId]:
    rng = random.Random(seed)
    return lambda: new_zone_id(rng)


@dataclass(frozen=True)
class ZoneSpec:
    kernel_image: str
    memory_mib: int = 0
    vcpus: int = 0
    role: Role = Role.WORKLOAD

    def __post_init__(self):
        if not self.kernel_image:
            raise ValueError("kernel_image must be non-empty")
        if self.memory_mib < 0 or self.vcpus < 0:
            raise ValueError("memory_mib and vcpus must be non-negative")

    @property
    def zero_resource(self) -> bool:
        return self.memory_mib == 0 and self.vcpus == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "kernel_image": self.kernel_image,
            "memory_mib": self.memory_mib,
            "vcpus": self.vcpus,
            "role": self.role.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ZoneSpec":
        return cls(d["kernel_image"], int(d["memory_mib"]), int(d["vcpus"]), Role(d["role"]))


@dataclass
class ZoneRecord:
    id: ZoneId
    spec: ZoneSpec
    state: ZoneState = ZoneState.PROVISIONING
    domain: Optional[int] = None
    granted_cpus: set[int] = field(default_factory=set)
    granted_pages: int = 0
    last_heartbeat: Optional[float] = None
    workload: Optional[dict[str, Any]] = None
    warm: bool = False

    @property
    def key(self) -> str:
        return f"zone/{self.id}"

    @property
    def live(self) -> bool:
        return self.state is not ZoneState.DEPROVISIONED

    def advanced(self, event: LifecycleEvent) -> "ZoneRecord":
        return replace(self, state=transition(self.state, event), granted_cpus=set(self.granted_cpus))

    def tombstone(self) -> "ZoneRecord":
        return replace(
            self,
            state=transition(self.state, LifecycleEvent.DEPROVISION),
            domain=None,
            granted_cpus=set(),
            granted_pages=0,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "spec": self.spec.to_dict(),
            "state": self.state.value,
            "domain": self.domain,
            "granted_cpus": sorted(self.granted_cpus),
            "granted_pages": self.granted_pages,
            "last_heartbeat": self.last_heartbeat,
            "workload": self.workload,
            "warm": self.warm,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ZoneRecord":
        return cls(
            id=d["id"],
            spec=ZoneSpec.from_dict(d["spec"]),
            state=ZoneState(d["state"]),
            domain=d.get("domain"),
            granted_cpus=set(d.get("granted_cpus", ())),
            granted_pages=int(d.get("granted_pages", 0)),
            last_heartbeat=d.get("last_heartbeat"),
            workload=d.get("workload"),
            warm=bool(d.get("warm", False)),
        )
