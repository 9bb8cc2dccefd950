"""protect-network: every zone packet is routed, counted and policed here.

Zones never hold a reference to each other or to the outside world; a
:class:`ZoneInterface` only knows the proxy. That is what makes the
"no packet bypasses the proxy" property structural rather than advisory.
"""

from __future__ import annotations

import enum
import itertools
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

from .errors import DialRefused, ZoneNotActive
from .zone import ZoneId, ZoneState

MAX_PACKET = 64 * 1024


@dataclass(frozen=True)
class External:
    address: str


Destination = Union[ZoneId, External]


@dataclass(frozen=True)
class ZonePacket:
    src: ZoneId
    dst: Destination
    payload: bytes
    seq: int = 0


class DropReason(str, enum.Enum):
    QUARANTINED = "quarantined"
    NO_ROUTE = "no_route"
    OVERSIZE = "oversize"
    SOURCE_INACTIVE = "source_inactive"


@dataclass(frozen=True)
class Delivered:
    pass


@dataclass(frozen=True)
class Dropped:
    reason: DropReason


RouteResult = Union[Delivered, Dropped]


@dataclass(frozen=True)
class Counters:
    seen_packets: int = 0
    seen_bytes: int = 0
    delivered_packets: int = 0
    delivered_bytes: int = 0
    dropped_packets: int = 0
    dropped_bytes: int = 0

    def __add__(self, other: "Counters") -> "Counters":
        return Counters(*(a + b for a, b in zip(self._astuple(), other._astuple())))

    def _astuple(self) -> tuple[int, ...]:
        return (
            self.seen_packets,
            self.seen_bytes,
            self.delivered_packets,
            self.delivered_bytes,
            self.dropped_packets,
            self.dropped_bytes,
        )


@dataclass(frozen=True)
class TrafficCounters:
    per_zone: dict[ZoneId, Counters]
    total: Counters
    drops_by_reason: dict[str, int] = field(default_factory=dict)


class SimEndpoint:
    """An external peer in the simulated endpoint table."""

    def __init__(self, accept: bool = True):
        self.accept = accept
        self.received: list[tuple[ZoneId, bytes]] = []


@dataclass
class _Stream:
    zone: ZoneId
    target: str
    open: bool = True


class NetProxy:
    def __init__(
        self,
        zone_state: Callable[[ZoneId], Optional[ZoneState]],
        endpoints: Optional[dict[str, SimEndpoint]] = None,
    ):
        self._zone_state = zone_state
        self.endpoints: dict[str, SimEndpoint] = dict(endpoints or {})
        self._lock = threading.Lock()
        self._counters: dict[ZoneId, Counters] = defaultdict(Counters)
        self._drops: dict[str, int] = defaultdict(int)
        self._inbox: dict[ZoneId, deque[ZonePacket]] = defaultdict(deque)
        self._quarantined: set[ZoneId] = set()
        self._streams: dict[int, _Stream] = {}
        self._stream_ids = itertools.count(1)
        self.alive = True

    # -- control (driven by the daemon) ----------------------------------

    def set_quarantine(self, zone: ZoneId, on: bool) -> None:
        with self._lock:
            if on:
                self._quarantined.add(zone)
            else:
                self._quarantined.discard(zone)

    def forget(self, zone: ZoneId) -> None:
        with self._lock:
            self._quarantined.discard(zone)
            self._inbox.pop(zone, None)
            for s in self._streams.values():
                if s.zone == zone:
                    s.open = False

    def register_endpoint(self, address: str, endpoint: Optional[SimEndpoint] = None) -> SimEndpoint:
        ep = endpoint or SimEndpoint()
        self.endpoints[address] = ep
        return ep

    def interface(self, zone: ZoneId) -> "ZoneInterface":
        return ZoneInterface(zone, self)

    # -- data path -------------------------------------------------------

    def route_packet(self, p: ZonePacket) -> RouteResult:
        size = len(p.payload)
        with self._lock:
            c = self._counters[p.src]
            c = replace(c, seen_packets=c.seen_packets + 1, seen_bytes=c.seen_bytes + size)
            reason = self._policy(p)
            if reason is None:
                if isinstance(p.dst, External):
                    self.endpoints[p.dst.address].received.append((p.src, bytes(p.payload)))
                else:
                    self._inbox[p.dst].append(p)
                c = replace(c, delivered_packets=c.delivered_packets + 1, delivered_bytes=c.delivered_bytes + size)
                result: RouteResult = Delivered()
            else:
                c = replace(c, dropped_packets=c.dropped_packets + 1, dropped_bytes=c.dropped_bytes + size)
                self._drops[reason.value] += 1
                result = Dropped(reason)
            self._counters[p.src] = c
        return result

    def _policy(self, p: ZonePacket) -> Optional[DropReason]:
        if len(p.payload) > MAX_PACKET:
            return DropReason.OVERSIZE
        src_state = self._zone_state(p.src)
        if p.src in self._quarantined or src_state is ZoneState.QUARANTINED:
            return DropReason.QUARANTINED
        if src_state is not ZoneState.ACTIVE:
            return DropReason.SOURCE_INACTIVE
        if isinstance(p.dst, External):
            ep = self.endpoints.get(p.dst.address)
            return None if ep is not None and ep.accept else DropReason.NO_ROUTE
        dst_state = self._zone_state(p.dst)
        if p.dst in self._quarantined or dst_state is ZoneState.QUARANTINED:
            return DropReason.QUARANTINED
        if dst_state is not ZoneState.ACTIVE:
            return DropReason.NO_ROUTE
        return None

    def receive(self, zone: ZoneId) -> list[ZonePacket]:
        with self._lock:
            q = self._inbox.pop(zone, None)
        return list(q) if q else []

    # -- sockets ---------------------------------------------------------

    def dial_socket(self, zone: ZoneId, target: str) -> int:
        """Open an outbound stream on the zone's behalf."""
        if zone in self._quarantined or self._zone_state(zone) is not ZoneState.ACTIVE:
            raise ZoneNotActive(f"zone {zone} is not active")
        ep = self.endpoints.get(target)
        if ep is None or not ep.accept:
            raise DialRefused(f"no endpoint at {target}")
        sid = next(self._stream_ids)
        self._streams[sid] = _Stream(zone, target)
        return sid

    def stream_send(self, stream_id: int, data: bytes, seq: int = 0) -> RouteResult:
        s = self._streams[stream_id]
        if not s.open:
            raise DialRefused(f"stream {stream_id} is closed")
        # stream bytes are ordinary packets, so they are counted and policed
        return self.route_packet(ZonePacket(s.zone, External(s.target), bytes(data), seq))

    def close_stream(self, stream_id: int) -> None:
        self._streams[stream_id].open = False

    # -- observability ---------------------------------------------------

    def snapshot_counters(self) -> TrafficCounters:
        with self._lock:
            per_zone = dict(self._counters)
            drops = dict(self._drops)
        total = Counters()
        for c in per_zone.values():
            total = total + c
        return TrafficCounters(per_zone, total, drops)


class ZoneInterface:
    """A zone's ethernet interface. It can only talk to the proxy."""

    def __init__(self, zone: ZoneId, proxy: NetProxy):
        self.zone = zone
        self._proxy = proxy
        self._seq: dict[Destination, int] = defaultdict(int)
        self.emitted = 0

    def send(self, dst: Destination, payload: bytes) -> RouteResult:
        seq = self._seq[dst]
        self._seq[dst] += 1
        self.emitted += 1
        return self._proxy.route_packet(ZonePacket(self.zone, dst, bytes(payload), seq))

    def recv(self) -> list[ZonePacket]:
        return self._proxy.receive(self.zone)
