"""Exception hierarchy shared by every control-plane service."""

from __future__ import annotations


class EderaError(Exception):
    """Base class for all operational errors raised by this package."""


# lifecycle


class IllegalTransition(EderaError):
    def __init__(self, state, event):
        super().__init__(f"no transition from {state.value} on {event.value}")
        self.state = state
        self.event = event


# hypervisor


class HypervisorError(EderaError):
    pass


class InsufficientMemory(HypervisorError):
    pass


class InsufficientCpus(HypervisorError):
    pass


class NoSuchDomain(HypervisorError):
    pass


class RootUndestroyable(HypervisorError):
    pass


class CpuBusy(HypervisorError):
    pass


class BadCpuIndex(HypervisorError):
    pass


class NotPinnedHere(HypervisorError):
    pass


class NoRunnableDomains(HypervisorError):
    pass


# inter-domain messaging


class IdmError(EderaError):
    pass


class PayloadTooLarge(IdmError):
    pass


class BadMagic(IdmError):
    pass


class BadVersion(IdmError):
    pass


class FrameTooLarge(IdmError):
    pass


class Truncated(IdmError):
    pass


class CrcMismatch(IdmError):
    pass


class UnknownType(IdmError):
    pass


class MalformedPayload(IdmError):
    pass


class ChannelClosed(IdmError):
    pass


class Backpressure(IdmError):
    """The sender's inflight budget is exhausted; the frame was not enqueued."""


# daemon / store


class StoreUnavailable(EderaError):
    pass


class NoSuchKey(EderaError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class NamespaceViolation(EderaError, PermissionError):
    pass


class NoSuchZone(EderaError):
    pass


class DeviceBusy(EderaError):
    pass


class NoSuchSlice(EderaError):
    pass


class NoSuchDevice(EderaError):
    pass


class DriverUnavailable(EderaError):
    pass


# network


class ZoneNotActive(EderaError):
    pass


class DialRefused(EderaError):
    pass


# cri


class MalformedManifest(EderaError):
    pass


class BadAnnotationValue(MalformedManifest):
    pass


class UnmanagedPod(EderaError):
    pass


class DaemonUnavailable(EderaError):
    def __init__(self, message: str = "daemon unavailable", diff=None):
        super().__init__(message)
        self.diff = diff


# scenarios


class ScenarioFailed(EderaError):
    pass
