from .hypervisor import (
    DEFAULT_WEIGHT,
    ROOT_DOMAIN,
    DomainHandle,
    HostConfig,
    HvEvent,
    Hypervisor,
    PermissionFault,
    Released,
    SchedTrace,
)
from .sched import BACKEND as SCHED_BACKEND

__all__ = [
    "DEFAULT_WEIGHT",
    "ROOT_DOMAIN",
    "SCHED_BACKEND",
    "DomainHandle",
    "HostConfig",
    "HvEvent",
    "Hypervisor",
    "PermissionFault",
    "Released",
    "SchedTrace",
]
