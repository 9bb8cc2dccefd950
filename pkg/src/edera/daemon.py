"""protect-daemon: the virtual machine monitor for zones.

Owns zone lifecycle, the embedded store, one IDM channel per zone,
heartbeat supervision and driver-zone device attachments. All mutations run
on the caller's thread and are expected to be serialized by one control
loop (the CLI, the RPC server, or a test).
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Union

from .agent import AgentConfig, InitAgent, MonitorEvent, MonitorKind, exec_request_payload
from .clock import LogicalClock
from .devices import (
    DEFAULT_SLICE_BYTES,
    OP_READ,
    OP_WRITE,
    STATUS_DRIVER_UNAVAILABLE,
    STATUS_NOT_BOUND,
    STATUS_OK,
    DeviceAttachment,
    DeviceMode,
    driver_handler,
)
from .errors import (
    Backpressure,
    DaemonUnavailable,
    DeviceBusy,
    DriverUnavailable,
    EderaError,
    HypervisorError,
    IdmError,
    InsufficientCpus,
    NoSuchDevice,
    NoSuchKey,
    NoSuchSlice,
    NoSuchZone,
    ZoneNotActive,
)
from .hv import DEFAULT_WEIGHT, HostConfig, Hypervisor, PermissionFault
from .idm import Channel, Frame, MsgType, Tag, tlv_decode, tlv_encode, tlv_get
from .store import ScopedStoreHandle, ZoneStore
from .zone import (
    LifecycleEvent,
    Role,
    ZoneId,
    ZoneRecord,
    ZoneSpec,
    ZoneState,
    new_zone_id,
    transition,
)

log = logging.getLogger(__name__)

HOST_KEY = "host/config"
ZONE_PREFIX = "zone/"
DEVICE_PREFIX = "device/"
MAX_LOGS = 1024
_PUMP_LIMIT = 10_000


@dataclass(frozen=True)
class DaemonConfig:
    host: HostConfig = field(default_factory=lambda: HostConfig.from_mib(8, 16384))
    store_path: Union[str, Path, None] = None
    heartbeat_interval_ms: int = 500
    heartbeat_timeout_ms: int = 1500
    kernel_image_kib: int = 4096
    fsync: bool = True
    inflight_budget: int = 64
    slice_bytes: int = DEFAULT_SLICE_BYTES

    def __post_init__(self):
        if self.heartbeat_timeout_ms < 2 * self.heartbeat_interval_ms:
            raise ValueError("heartbeat timeout must cover at least two intervals")


@dataclass(frozen=True)
class StateChange:
    zone: ZoneId
    before: ZoneState
    after: ZoneState


@dataclass(frozen=True)
class ExecResult:
    exit_code: int
    stdout: bytes
    stderr: bytes
    frames: tuple[Frame, ...] = ()


@dataclass(frozen=True)
class LogEntry:
    at: float
    raw: bytes
    untrusted: bool = True


@dataclass(frozen=True)
class FaultReport:
    device_id: str
    driver_zone: ZoneId
    failed_requests: int
    states_before: dict[ZoneId, ZoneState]
    states_after: dict[ZoneId, ZoneState]

    def changed(self) -> list[ZoneId]:
        return sorted(z for z, s in self.states_before.items() if self.states_after.get(z) is not s)


@dataclass
class _Runtime:
    channel: Channel
    agent: InitAgent
    created_at: float
    heartbeats: int = 0
    logs: deque = field(default_factory=lambda: deque(maxlen=MAX_LOGS))
    events: deque = field(default_factory=lambda: deque(maxlen=MAX_LOGS))
    exec_streams: dict[int, dict[str, Any]] = field(default_factory=dict)
    stream_ids: Any = field(default_factory=lambda: itertools.count(1))
    decode_errors: int = 0


class ZoneDaemon:
    def __init__(
        self,
        config: Optional[DaemonConfig] = None,
        clock=None,
        id_factory: Optional[Callable[[], ZoneId]] = None,
        proxy=None,
    ):
        self.config = config or DaemonConfig()
        self.clock = clock or LogicalClock()
        self._new_id = id_factory or new_zone_id
        self.proxy = proxy
        self.store = ZoneStore(self.config.store_path, fsync=self.config.fsync)
        self.hv = Hypervisor(self._host_config())
        self.records: dict[ZoneId, ZoneRecord] = {}
        self.devices: dict[str, DeviceAttachment] = {}
        self._rt: dict[ZoneId, _Runtime] = {}
        # driver-side stream -> (device, client zone, client stream)
        self._pending_device: dict[tuple[ZoneId, int], tuple[str, ZoneId, int]] = {}
        self.mutations = 0
        self.available = True
        self._restore()

    # -- bootstrap -------------------------------------------------------

    def _host_config(self) -> HostConfig:
        try:
            doc = json.loads(self.store.get(HOST_KEY))
            return HostConfig(doc["cpu_count"], doc["page_count"], doc["page_size_kib"])
        except NoSuchKey:
            host = self.config.host
            self.store.put(
                HOST_KEY,
                json.dumps(
                    {"cpu_count": host.cpu_count, "page_count": host.page_count, "page_size_kib": host.page_size_kib},
                    sort_keys=True,
                ).encode(),
            )
            return host

    def _restore(self) -> None:
        """Rebuild simulator domains and agents for every live record."""
        now = self.clock.now()
        for key, raw in self.store.items(ZONE_PREFIX):
            if "/" in key[len(ZONE_PREFIX):]:
                continue  # zone-scoped data, not a record
            rec = ZoneRecord.from_dict(json.loads(raw))
            # domain ids belong to the previous simulator instance
            self.records[rec.id] = replace(rec, domain=None)
        for rec in sorted(self.records.values(), key=lambda r: r.id):
            if not rec.live:
                continue
            if rec.state is ZoneState.NOT_RESPONDING:
                self._deprovision(rec.id)
                continue
            try:
                handle = self.hv.create_domain(rec.spec, DEFAULT_WEIGHT)
            except HypervisorError as e:
                log.warning("zone %s cannot be restored: %s", rec.id, e)
                self.records[rec.id] = replace(rec, state=ZoneState.DEPROVISIONED, domain=None, granted_cpus=set(), granted_pages=0)
                self._persist(self.records[rec.id])
                continue
            pinned = set()
            for cpu in sorted(rec.granted_cpus):
                try:
                    self.hv.pin_cpu(handle, cpu)
                    pinned.add(cpu)
                except HypervisorError:
                    pass
            rec = replace(rec, domain=handle.domain_id, granted_cpus=pinned,
                          granted_pages=self.hv.pages_of(handle), last_heartbeat=now)
            self.records[rec.id] = rec
            self._start_runtime(rec)
        for key, raw in self.store.items(DEVICE_PREFIX):
            att = DeviceAttachment.from_dict(json.loads(raw))
            driver = self.records.get(att.driver_zone)
            if driver is None or not driver.live:
                att.driver_alive = False
            for idx, client in list(att.slices.items()):
                if client is not None and not self._is_live(client):
                    att.slices[idx] = None
            self.devices[att.device_id] = att
            if att.driver_alive and att.driver_zone in self._rt:
                self._rt[att.driver_zone].agent.device_handler = driver_handler(att)
        self.pump()

    def restart(self) -> None:
        """Process restart: the store is re-opened (and recovered); the
        hypervisor and the zones keep running underneath."""
        self.store.close()
        self.store.open()
        self.available = True

    def close(self) -> None:
        for rt in self._rt.values():
            rt.channel.close()
        self.store.close()

    def ping(self) -> None:
        if not self.available:
            raise DaemonUnavailable("protect-daemon is not running")

    # -- queries ---------------------------------------------------------

    def get(self, zone_id: ZoneId) -> ZoneRecord:
        try:
            return self.records[zone_id]
        except KeyError:
            raise NoSuchZone(zone_id) from None

    def state_of(self, zone_id: ZoneId) -> Optional[ZoneState]:
        rec = self.records.get(zone_id)
        return rec.state if rec else None

    def list_zones(self, include_tombstones: bool = True) -> list[ZoneRecord]:
        recs = sorted(self.records.values(), key=lambda r: r.id)
        return [r for r in recs if include_tombstones or r.live]

    def agent(self, zone_id: ZoneId) -> InitAgent:
        try:
            return self._rt[zone_id].agent
        except KeyError:
            raise NoSuchZone(f"zone {zone_id} has no running agent") from None

    def zone_logs(self, zone_id: ZoneId) -> list[LogEntry]:
        return list(self._rt[zone_id].logs) if zone_id in self._rt else []

    def zone_events(self, zone_id: ZoneId) -> list[MonitorEvent]:
        return list(self._rt[zone_id].events) if zone_id in self._rt else []

    def zone_store_handle(self, zone_id: ZoneId) -> ScopedStoreHandle:
        """Store handle scoped to the zone's own ``zone/<uuid>/`` data area."""
        self.get(zone_id)
        return self.store.scoped(f"{ZONE_PREFIX}{zone_id}/")

    def check_coherence(self) -> None:
        live_domains = {r.domain for r in self.records.values() if r.live}
        sim = set(self.hv.domain_ids()) - {0}
        assert live_domains == sim, f"store/simulator mismatch: {live_domains} vs {sim}"
        for r in self.records.values():
            if r.live:
                assert self.hv.pages_of(r.domain) == r.granted_pages
                assert self.hv.pinned_cpus(r.domain) == r.granted_cpus
            else:
                assert r.domain is None and not r.granted_cpus and r.granted_pages == 0

    # -- lifecycle -------------------------------------------------------

    def create_zone(
        self,
        spec: ZoneSpec,
        warm: bool = False,
        workload: Optional[dict[str, Any]] = None,
        weight: int = DEFAULT_WEIGHT,
    ) -> ZoneRecord:
        """Create, boot and wait for the first heartbeat of a new zone."""
        self.ping()
        if spec.role is Role.ROOT:
            raise ValueError("the root zone is not created through the daemon")
        if spec.zero_resource and not warm:
            raise ValueError("only warm zones may be created without resources")
        self.store._require_open()
        handle = self.hv.create_domain(spec, weight)
        self.clock.charge()
        zid = self._new_id()
        while zid in self.records:
            zid = self._new_id()
        rec = ZoneRecord(
            id=zid,
            spec=spec,
            state=ZoneState.PROVISIONING,
            domain=handle.domain_id,
            granted_pages=self.hv.pages_of(handle),
            workload=workload,
            warm=warm,
        )
        self.records[zid] = rec
        self.mutations += 1
        try:
            self._persist(rec)
        except EderaError:
            self.hv.destroy_domain(handle)
            del self.records[zid]
            raise
        self._boot_kernel(spec)
        self._start_runtime(rec)
        self._await_heartbeat(zid, 0)
        return self.records[zid]

    def activate_zone(self, zone_id: ZoneId, cpus: int, memory_mib: int) -> ZoneRecord:
        self.ping()
        rec = self.get(zone_id)
        new_state = transition(rec.state, LifecycleEvent.ACTIVATE)
        hv = self.hv
        pages = hv.host.pages_for(memory_mib)
        if cpus > hv.host.cpu_count:
            raise InsufficientCpus(f"{cpus} vcpus on a {hv.host.cpu_count}-cpu host")
        hv.grant_pages(rec.domain, pages)  # raises before any change on failure
        hv.set_vcpus(rec.domain, cpus)
        self.clock.charge()
        spec = replace(rec.spec, memory_mib=rec.spec.memory_mib + memory_mib, vcpus=cpus)
        seen = self._rt[zone_id].heartbeats
        rec = replace(rec, spec=spec, state=new_state, granted_pages=hv.pages_of(rec.domain))
        self._commit(rec)
        self._kick(zone_id)
        self._await_heartbeat(zone_id, seen)
        return self.records[zone_id]

    def quarantine_zone(self, zone_id: ZoneId) -> ZoneRecord:
        self.ping()
        rec = self.get(zone_id).advanced(LifecycleEvent.QUARANTINE)
        self._commit(rec)
        if self.proxy is not None:
            self.proxy.set_quarantine(zone_id, True)
        return rec

    def release_zone(self, zone_id: ZoneId) -> ZoneRecord:
        self.ping()
        rec = self.get(zone_id).advanced(LifecycleEvent.RELEASE)
        self._commit(rec)
        if self.proxy is not None:
            self.proxy.set_quarantine(zone_id, False)
        return rec

    def destroy_zone(self, zone_id: ZoneId) -> None:
        self.ping()
        rec = self.records.get(zone_id)
        if rec is None or not rec.live:
            raise NoSuchZone(zone_id)
        self._deprovision(zone_id)

    def grow_zone_memory(self, zone_id: ZoneId, additional_mib: int) -> ZoneRecord:
        self.ping()
        rec = self._require_live(zone_id)
        self.hv.grow_memory(rec.domain, additional_mib)
        spec = replace(rec.spec, memory_mib=rec.spec.memory_mib + additional_mib)
        rec = replace(rec, spec=spec, granted_pages=self.hv.pages_of(rec.domain))
        self._commit(rec)
        return rec

    def pin_zone_cpu(self, zone_id: ZoneId, cpu: int) -> ZoneRecord:
        self.ping()
        rec = self._require_live(zone_id)
        self.hv.pin_cpu(rec.domain, cpu)
        rec = replace(rec, granted_cpus=self.hv.pinned_cpus(rec.domain))
        self._commit(rec)
        return rec

    def unpin_zone_cpu(self, zone_id: ZoneId, cpu: int) -> ZoneRecord:
        self.ping()
        rec = self._require_live(zone_id)
        self.hv.unpin_cpu(rec.domain, cpu)
        rec = replace(rec, granted_cpus=self.hv.pinned_cpus(rec.domain))
        self._commit(rec)
        return rec

    def guest_pagetable_write(self, zone_id: ZoneId, page: int) -> PermissionFault:
        """A guest in ``zone_id`` tries to write a page-table page."""
        rec = self._require_live(zone_id)
        fault = self.hv.guest_write_pagetable(rec.domain, page)
        rt = self._rt.get(zone_id)
        if rt is not None:
            rt.agent.post_event(
                MonitorEvent(MonitorKind.PAGETABLE_FAULT_OBSERVED, f"page={page}", self.clock.now())
            )
        return fault

    # -- supervision -----------------------------------------------------

    def supervise(self, now: Optional[float] = None) -> list[StateChange]:
        """Deprovision zones whose init agent stopped heartbeating.

        Warm zones are exempt: they may hold no CPU at all.
        """
        now = self.clock.now() if now is None else now
        timeout = self.config.heartbeat_timeout_ms
        changes: list[StateChange] = []
        for zid in sorted(self.records):
            rec = self.records[zid]
            if rec.state in (ZoneState.ACTIVE, ZoneState.QUARANTINED):
                last = rec.last_heartbeat
                if last is not None and now - last > timeout:
                    self._commit(rec.advanced(LifecycleEvent.HEARTBEAT_TIMEOUT))
                    changes.append(StateChange(zid, rec.state, ZoneState.NOT_RESPONDING))
                    self._fail_driver(zid)
            elif rec.state is ZoneState.PROVISIONING:
                rt = self._rt.get(zid)
                if rt is not None and rt.heartbeats == 0 and now - rt.created_at > timeout:
                    self._deprovision(zid)
                    changes.append(StateChange(zid, ZoneState.PROVISIONING, ZoneState.DEPROVISIONED))
                    continue
            if self.records[zid].state is ZoneState.NOT_RESPONDING:
                self._deprovision(zid)
                changes.append(StateChange(zid, ZoneState.NOT_RESPONDING, ZoneState.DEPROVISIONED))
        return changes

    def pump(self, now: Optional[float] = None) -> int:
        """Tick every agent once and process everything they sent."""
        now = self.clock.now() if now is None else now
        n = 0
        for zid in sorted(self._rt):
            rt = self._rt.get(zid)
            if rt is None:
                continue
            if rt.agent.enabled and not rt.channel.closed:
                rt.agent.tick(now)
            n += self._drain(zid, now)
        return n

    def _drain(self, zid: ZoneId, now: float) -> int:
        rt = self._rt.get(zid)
        n = 0
        while rt is not None and not rt.channel.closed:
            try:
                frame = rt.channel.daemon.recv_frame()
            except IdmError:
                rt.decode_errors += 1
                continue
            if frame is None:
                break
            n += 1
            self._handle(zid, rt, frame, now)
            rt = self._rt.get(zid)
        return n

    def _handle(self, zid: ZoneId, rt: _Runtime, frame: Frame, now: float) -> None:
        t = frame.msg_type
        if t is MsgType.HEARTBEAT:
            rt.heartbeats += 1
            rec = self.records[zid]
            rec.last_heartbeat = now
            if rec.state is ZoneState.PROVISIONING:
                event = LifecycleEvent.BOOT_COMPLETE_WARM if rec.warm else LifecycleEvent.BOOT_COMPLETE_ACTIVE
                self._commit(rec.advanced(event))
            return
        if t is MsgType.LOG:
            # agent logs are untrusted and never parsed for control decisions
            rt.logs.append(LogEntry(now, frame.payload))
            return
        if t is MsgType.EVENT:
            try:
                rt.events.append(MonitorEvent.from_payload(frame.payload))
            except (IdmError, ValueError, TypeError, struct.error):
                rt.logs.append(LogEntry(now, frame.payload))
            return
        if t in (MsgType.EXEC_OUTPUT, MsgType.EXIT_EVENT):
            st = rt.exec_streams.get(frame.stream_id)
            if st is None:
                return
            fields = tlv_decode(frame.payload)
            st["frames"].append(frame)
            if t is MsgType.EXEC_OUTPUT:
                fd = tlv_get(fields, Tag.FD, b"\x01")
                st["err" if fd == b"\x02" else "out"].append(tlv_get(fields, Tag.DATA, b""))
            else:
                st["exit"] = struct.unpack(">i", tlv_get(fields, Tag.EXIT_CODE))[0]
            return
        if t is MsgType.DEVICE_REQUEST:
            self._route_device_request(zid, frame)
            return
        if t is MsgType.DEVICE_REPLY:
            pending = self._pending_device.pop((zid, frame.stream_id), None)
            if pending is not None:
                _, client, client_stream = pending
                self._send_to_zone(client, Frame(MsgType.DEVICE_REPLY, client_stream, frame.payload))

    # -- exec ------------------------------------------------------------

    def exec(self, zone_id: ZoneId, argv: list[str], stdin: bytes = b"") -> ExecResult:
        """Run a command in the zone through its init agent (``kubectl exec``)."""
        self.ping()
        rec = self._require_live(zone_id)
        if rec.state not in (ZoneState.ACTIVE, ZoneState.QUARANTINED):
            raise ZoneNotActive(f"zone {zone_id} is {rec.state.value}")
        rt = self._rt[zone_id]
        sid = next(rt.stream_ids)
        rt.exec_streams[sid] = {"out": [], "err": [], "exit": None, "frames": []}
        self._send_to_zone(zone_id, Frame(MsgType.EXEC_REQUEST, sid, exec_request_payload(argv, stdin)))
        try:
            for _ in range(_PUMP_LIMIT):
                if rt.exec_streams[sid]["exit"] is not None:
                    break
                if not rt.agent.enabled:
                    raise ZoneNotActive(f"init agent of {zone_id} is not responding")
                self.pump()
            st = rt.exec_streams[sid]
            if st["exit"] is None:
                raise ZoneNotActive(f"no exit event from {zone_id}")
            return ExecResult(st["exit"], b"".join(st["out"]), b"".join(st["err"]), tuple(st["frames"]))
        finally:
            rt.exec_streams.pop(sid, None)

    # -- devices ---------------------------------------------------------

    def attach_device(
        self,
        device_id: str,
        mode: Union[DeviceMode, str] = DeviceMode.PASSTHROUGH,
        driver_spec: Optional[ZoneSpec] = None,
        slices: int = 1,
    ) -> DeviceAttachment:
        """Create a dedicated driver zone for ``device_id`` and attach the device to it."""
        self.ping()
        mode = DeviceMode(mode)
        if mode is DeviceMode.PASSTHROUGH:
            slices = 1
        if slices < 1:
            raise ValueError("need at least one slice")
        old = self.devices.get(device_id)
        if old is not None:
            if old.driver_alive and self._is_live(old.driver_zone):
                raise DeviceBusy(f"device {device_id} already attached to {old.driver_zone}")
            if self._is_live(old.driver_zone):
                self._deprovision(old.driver_zone)
        spec = driver_spec or ZoneSpec("driver-kernel:latest", memory_mib=64, vcpus=1, role=Role.DRIVER)
        if spec.role is not Role.DRIVER:
            spec = replace(spec, role=Role.DRIVER)
        driver = self.create_zone(spec, workload={"device": device_id})
        att = DeviceAttachment.new(device_id, mode, driver.id, slices, self.config.slice_bytes)
        self._rt[driver.id].agent.device_handler = driver_handler(att)
        self.devices[device_id] = att
        self._persist_device(att)
        self.mutations += 1
        return att

    def _attachment(self, device_id: str) -> DeviceAttachment:
        try:
            return self.devices[device_id]
        except KeyError:
            raise NoSuchDevice(device_id) from None

    def bind_slice(self, device_id: str, slice_idx: int, client: ZoneId) -> DeviceAttachment:
        self.ping()
        att = self._attachment(device_id)
        if slice_idx not in att.slices:
            raise NoSuchSlice(f"{device_id} has no slice {slice_idx}")
        if not att.driver_alive:
            raise DriverUnavailable(f"driver zone for {device_id} is gone")
        if self.get(client).state is not ZoneState.ACTIVE:
            raise ZoneNotActive(f"client {client} is not active")
        holder = att.slices[slice_idx]
        if holder is not None:
            raise DeviceBusy(f"{device_id} slice {slice_idx} is bound to {holder}")
        if att.slice_of(client) is not None:
            raise DeviceBusy(f"{client} already holds a slice of {device_id}")
        att.slices[slice_idx] = client
        self._persist_device(att)
        self.mutations += 1
        return att

    def unbind_slice(self, device_id: str, slice_idx: int) -> DeviceAttachment:
        self.ping()
        att = self._attachment(device_id)
        if att.slices.get(slice_idx) is None:
            raise NoSuchSlice(f"{device_id} slice {slice_idx} is not bound")
        # wipe before the slice becomes bindable again
        att.wipe(slice_idx)
        att.slices[slice_idx] = None
        self._persist_device(att)
        self.mutations += 1
        return att

    def device_request(
        self,
        client: ZoneId,
        device_id: str,
        op: str,
        offset: int = 0,
        data: bytes = b"",
        length: int = 0,
    ) -> bytes:
        """Issue a read/write from a workload in ``client`` to its device slice.

        The request travels client agent -> daemon -> driver zone and back
        over IDM. Returns the data read (empty for writes).
        """
        self.ping()
        rt = self._rt.get(client)
        if rt is None:
            raise NoSuchZone(client)
        fields = [
            (Tag.DEVICE_ID, device_id.encode()),
            (Tag.OP, op.encode()),
            (Tag.OFFSET, struct.pack(">I", offset)),
        ]
        if op.encode() == OP_WRITE:
            fields.append((Tag.DATA, bytes(data)))
        elif op.encode() == OP_READ:
            fields.append((Tag.LENGTH, struct.pack(">I", length)))
        else:
            raise ValueError(f"unknown device op {op!r}")
        sid = rt.agent.request_device(fields)
        for _ in range(_PUMP_LIMIT):
            if sid in rt.agent.device_replies:
                break
            self.pump()
        reply = rt.agent.device_replies.pop(sid, None)
        if reply is None:
            raise DriverUnavailable(f"no reply from driver of {device_id}")
        status = tlv_get(reply, Tag.STATUS)
        if status == STATUS_OK:
            return tlv_get(reply, Tag.DATA, b"")
        if status == STATUS_DRIVER_UNAVAILABLE:
            raise DriverUnavailable(f"driver for {device_id} unavailable")
        if status == STATUS_NOT_BOUND:
            raise NoSuchSlice(f"{client} holds no slice of {device_id}")
        raise ValueError(f"device request rejected: {status!r}")

    def _route_device_request(self, client: ZoneId, frame: Frame) -> None:
        fields = tlv_decode(frame.payload)
        device_id = (tlv_get(fields, Tag.DEVICE_ID) or b"").decode(errors="replace")
        att = self.devices.get(device_id)

        def reply(status: bytes) -> None:
            self._send_to_zone(client, Frame(MsgType.DEVICE_REPLY, frame.stream_id, tlv_encode([(Tag.STATUS, status)])))

        if att is None:
            reply(STATUS_NOT_BOUND)
            return
        # a dead driver has already dropped its bindings; report the outage, not the unbind
        if not att.driver_alive or att.driver_zone not in self._rt:
            reply(STATUS_DRIVER_UNAVAILABLE)
            return
        idx = att.slice_of(client)
        if idx is None:
            reply(STATUS_NOT_BOUND)
            return
        # the daemon, not the client, decides which slice is addressed
        fields = [(t, v) for t, v in fields if t != Tag.SLICE] + [(Tag.SLICE, struct.pack(">I", idx))]
        drt = self._rt[att.driver_zone]
        dsid = next(drt.stream_ids)
        self._pending_device[(att.driver_zone, dsid)] = (device_id, client, frame.stream_id)
        self._send_to_zone(att.driver_zone, Frame(MsgType.DEVICE_REQUEST, dsid, tlv_encode(fields)))

    def inject_driver_fault(self, device_id: str) -> FaultReport:
        """Simulate a driver exploit/crash inside the device's driver zone."""
        att = self._attachment(device_id)
        before = {z: r.state for z, r in self.records.items()}
        driver = att.driver_zone
        if driver in self._rt:
            self._rt[driver].agent.disable()
        failed = self._fail_driver(driver)
        rec = self.records.get(driver)
        if rec is not None and rec.state in (ZoneState.ACTIVE, ZoneState.QUARANTINED):
            self._commit(rec.advanced(LifecycleEvent.FAULT))
        after = {z: r.state for z, r in self.records.items()}
        return FaultReport(device_id, driver, failed, before, after)

    def _fail_driver(self, zone_id: ZoneId) -> int:
        """Mark attachments served by ``zone_id`` dead and fail pending requests."""
        failed = 0
        for att in self.devices.values():
            if att.driver_zone != zone_id or not att.driver_alive:
                continue
            att.driver_alive = False
            for key, (dev, client, cstream) in list(self._pending_device.items()):
                if dev == att.device_id:
                    del self._pending_device[key]
                    failed += 1
                    self._send_to_zone(
                        client,
                        Frame(MsgType.DEVICE_REPLY, cstream, tlv_encode([(Tag.STATUS, STATUS_DRIVER_UNAVAILABLE)])),
                    )
            for idx in att.slices:
                att.wipe(idx)
                att.slices[idx] = None
            self._persist_device(att)
        return failed

    # -- store passthrough -----------------------------------------------

    def kv_put(self, key: str, value: bytes) -> None:
        self.store.put(key, value)

    def kv_get(self, key: str) -> bytes:
        return self.store.get(key)

    def kv_list(self, prefix: str = "") -> list[str]:
        return self.store.list(prefix)

    # -- migration -------------------------------------------------------

    def export_zone(self, zone_id: ZoneId) -> bytes:
        """Serialize a zone (record plus written guest pages) and remove it here."""
        rec = self._require_live(zone_id)
        pages = {}
        for gp in range(rec.granted_pages):
            data = self.hv.guest_read_memory(rec.domain, gp)
            if any(data):
                pages[str(gp)] = base64.b64encode(data).decode()
        blob = json.dumps({"record": rec.to_dict(), "pages": pages}, sort_keys=True).encode()
        self._deprovision(zone_id)
        return blob

    def import_zone(self, blob: bytes) -> ZoneRecord:
        doc = json.loads(blob)
        rec = ZoneRecord.from_dict(doc["record"])
        if rec.id in self.records:
            raise ValueError(f"zone {rec.id} already known here")
        handle = self.hv.create_domain(rec.spec, DEFAULT_WEIGHT)
        for gp, data in doc["pages"].items():
            self.hv.guest_write_memory(handle, int(gp), base64.b64decode(data))
        rec = replace(rec, domain=handle.domain_id, granted_cpus=set(),
                      granted_pages=self.hv.pages_of(handle), last_heartbeat=self.clock.now())
        self.records[rec.id] = rec
        self.mutations += 1
        self._persist(rec)
        self._start_runtime(rec)
        self.pump()
        return self.records[rec.id]

    # -- internals -------------------------------------------------------

    def _is_live(self, zone_id: ZoneId) -> bool:
        rec = self.records.get(zone_id)
        return rec is not None and rec.live

    def _require_live(self, zone_id: ZoneId) -> ZoneRecord:
        rec = self.get(zone_id)
        if not rec.live:
            raise NoSuchZone(f"zone {zone_id} is deprovisioned")
        return rec

    def _persist(self, rec: ZoneRecord) -> None:
        self.store.put(rec.key, json.dumps(rec.to_dict(), sort_keys=True).encode())
        self.clock.charge()

    def _persist_device(self, att: DeviceAttachment) -> None:
        self.store.put(DEVICE_PREFIX + att.device_id, json.dumps(att.to_dict(), sort_keys=True).encode())

    def _commit(self, rec: ZoneRecord) -> None:
        self.records[rec.id] = rec
        self.mutations += 1
        self._persist(rec)

    def _boot_kernel(self, spec: ZoneSpec) -> str:
        """Stage and verify the guest kernel image; returns its digest."""
        kib = self.config.kernel_image_kib
        image = hashlib.shake_256(spec.kernel_image.encode()).digest(kib * 1024) if kib else b""
        self.clock.charge(max(1, kib // 1024))
        return hashlib.sha256(image).hexdigest()

    def _start_runtime(self, rec: ZoneRecord) -> None:
        chan = Channel(self.config.inflight_budget)
        agent = InitAgent(AgentConfig(rec.id, self.config.heartbeat_interval_ms), chan.zone)
        self._rt[rec.id] = _Runtime(chan, agent, self.clock.now())
        self.clock.charge()

    def _await_heartbeat(self, zone_id: ZoneId, seen: int) -> None:
        rt = self._rt[zone_id]
        for _ in range(_PUMP_LIMIT):
            if rt.heartbeats > seen or not rt.agent.enabled:
                return
            # only this zone's agent needs to run; the others keep their schedule
            if not rt.channel.closed:
                rt.agent.tick(self.clock.now())
            self._drain(zone_id, self.clock.now())
            self.clock.charge()

    def _kick(self, zone_id: ZoneId) -> None:
        self._send_to_zone(zone_id, Frame(MsgType.EVENT, 0, tlv_encode([(Tag.CONTROL, b"kick")])))

    def _send_to_zone(self, zone_id: ZoneId, frame: Frame) -> None:
        rt = self._rt.get(zone_id)
        if rt is None or rt.channel.closed:
            return
        for _ in range(_PUMP_LIMIT):
            try:
                rt.channel.daemon.send(frame)
                return
            except Backpressure:
                # let the agent drain its inbox before retrying
                if not rt.agent.enabled:
                    return
                rt.agent.tick(self.clock.now())
                self._drain(zone_id, self.clock.now())

    def _deprovision(self, zone_id: ZoneId) -> None:
        rec = self.records[zone_id]
        if rec.domain is not None and self.hv.exists(rec.domain):
            self.hv.destroy_domain(rec.domain)
        rt = self._rt.pop(zone_id, None)
        if rt is not None:
            rt.channel.close()
        for key in [k for k in self._pending_device if k[0] == zone_id]:
            del self._pending_device[key]
        self._fail_driver(zone_id)
        for att in self.devices.values():
            idx = att.slice_of(zone_id)
            if idx is not None:
                att.wipe(idx)
                att.slices[idx] = None
                self._persist_device(att)
        if self.proxy is not None:
            self.proxy.forget(zone_id)
        self._commit(rec.tombstone())
