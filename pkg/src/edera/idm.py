"""Inter-domain messaging: framed, bounded, checksummed byte channel.

Frame layout (all integers big-endian)::

    offset  size  field
    0       2     magic      0xED 0x7A
    2       1     version    0x01
    3       1     msg_type
    4       4     stream_id
    8       4     payload_len  (<= 1 MiB)
    12      N     payload      (TLV fields)
    12+N    4     crc32        IEEE CRC-32 over bytes [0, 12+N)

Payloads are a sequence of TLV fields: tag (1 byte), length (2 bytes),
value. Tags may repeat; values longer than 65535 bytes are split across
repeated fields.
"""

from __future__ import annotations

import enum
import struct
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

from .errors import (
    Backpressure,
    BadMagic,
    BadVersion,
    ChannelClosed,
    CrcMismatch,
    FrameTooLarge,
    MalformedPayload,
    PayloadTooLarge,
    Truncated,
    UnknownType,
)

MAGIC = b"\xed\x7a"
VERSION = 0x01
MAX_PAYLOAD = 1 << 20
HEADER = struct.Struct(">2sBBII")
HEADER_LEN = HEADER.size  # 12
TRAILER_LEN = 4
OVERHEAD = HEADER_LEN + TRAILER_LEN
DEFAULT_INFLIGHT = 64
TLV_MAX = 0xFFFF


class MsgType(enum.IntEnum):
    HEARTBEAT = 0x01
    EVENT = 0x02
    EXEC_REQUEST = 0x03
    EXEC_OUTPUT = 0x04
    EXIT_EVENT = 0x05
    LOG = 0x06
    DEVICE_REQUEST = 0x07
    DEVICE_REPLY = 0x08


class Tag(enum.IntEnum):
    """TLV field tags used by the payload schemas of each message type."""

    ZONE_ID = 0x01
    SEQ = 0x02
    EVENT_KIND = 0x10
    DETAIL = 0x11
    AT = 0x12
    ARGV = 0x20
    STDIN = 0x21
    FD = 0x22
    DATA = 0x23
    EXIT_CODE = 0x24
    LOG_TEXT = 0x30
    DEVICE_ID = 0x40
    OP = 0x41
    SLICE = 0x42
    OFFSET = 0x43
    LENGTH = 0x44
    STATUS = 0x45
    CONTROL = 0x50


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    stream_id: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self.msg_type, self.stream_id, self.payload)


def encode_frame(msg_type: int, stream_id: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    msg_type = MsgType(msg_type)
    if not 0 <= stream_id <= 0xFFFFFFFF:
        raise ValueError("stream_id must fit in 32 bits")
    body = HEADER.pack(MAGIC, VERSION, msg_type, stream_id, len(payload)) + bytes(payload)
    return body + struct.pack(">I", zlib.crc32(body))


def _check_header(header: bytes) -> tuple[int, int, int]:
    magic, version, msg_type, stream_id, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic.hex()}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return msg_type, stream_id, length


def _finish(header: bytes, rest: bytes, msg_type: int, stream_id: int, length: int) -> Frame:
    payload, crc = rest[:length], rest[length:]
    (want,) = struct.unpack(">I", crc)
    if zlib.crc32(payload, zlib.crc32(header)) != want:
        raise CrcMismatch("frame checksum mismatch")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise UnknownType(f"unknown msg_type 0x{msg_type:02x}") from None
    return Frame(kind, stream_id, bytes(payload))


def decode_frame(data: Union[bytes, bytearray, memoryview]) -> tuple[Frame, int]:
    """Parse one frame from the front of ``data``.

    Returns the frame and the number of bytes consumed. Checks run in a
    fixed order (magic, version, length bound, truncation, checksum, type)
    so every input maps to exactly one outcome.
    """
    view = memoryview(data)
    if len(view) < 2:
        if bytes(view) != MAGIC[: len(view)]:
            raise BadMagic("bad magic")
        raise Truncated("short header")
    if bytes(view[:2]) != MAGIC:
        raise BadMagic(f"bad magic {bytes(view[:2]).hex()}")
    if len(view) < HEADER_LEN:
        if len(view) >= 3 and view[2] != VERSION:
            raise BadVersion(f"unsupported version {view[2]}")
        raise Truncated("short header")
    header = bytes(view[:HEADER_LEN])
    msg_type, stream_id, length = _check_header(header)
    end = HEADER_LEN + length + TRAILER_LEN
    if len(view) < end:
        raise Truncated(f"need {end} bytes, have {len(view)}")
    return _finish(header, view[HEADER_LEN:end], msg_type, stream_id, length), end


def read_frame(read: Callable[[int], bytes]) -> Optional[Frame]:
    """Read exactly one frame from a byte stream.

    ``read(n)`` must behave like ``io.RawIOBase.read``. The payload is only
    read after the declared length passed the bound check. Returns None at a
    clean end of stream.
    """
    header = _read_exact(read, HEADER_LEN, allow_eof=True)
    if header is None:
        return None
    if header[:2] != MAGIC:
        raise BadMagic(f"bad magic {header[:2].hex()}")
    msg_type, stream_id, length = _check_header(header)
    rest = _read_exact(read, length + TRAILER_LEN)
    return _finish(header, rest, msg_type, stream_id, length)


def _read_exact(read: Callable[[int], bytes], n: int, allow_eof: bool = False):
    buf = bytearray()
    while len(buf) < n:
        chunk = read(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise Truncated(f"stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


# -- TLV payloads --------------------------------------------------------


def tlv_encode(fields: Iterable[tuple[int, bytes]]) -> bytes:
    out = bytearray()
    for tag, value in fields:
        if not 0 <= tag <= 0xFF:
            raise ValueError(f"tag {tag} out of range")
        value = bytes(value)
        # long values become repeated fields with the same tag
        for i in range(0, max(len(value), 1), TLV_MAX):
            part = value[i : i + TLV_MAX]
            out += struct.pack(">BH", tag, len(part)) + part
    return bytes(out)


def tlv_decode(payload: bytes) -> list[tuple[int, bytes]]:
    fields = []
    i, n = 0, len(payload)
    while i < n:
        if i + 3 > n:
            raise MalformedPayload("truncated TLV header")
        tag, length = struct.unpack_from(">BH", payload, i)
        i += 3
        if i + length > n:
            raise MalformedPayload("truncated TLV value")
        fields.append((tag, payload[i : i + length]))
        i += length
    return fields


def tlv_get(fields: list[tuple[int, bytes]], tag: int, default: Optional[bytes] = None) -> Optional[bytes]:
    """Concatenate every field carrying ``tag`` (None/default if absent)."""
    parts = [v for t, v in fields if t == tag]
    return b"".join(parts) if parts else default


def tlv_all(fields: list[tuple[int, bytes]], tag: int) -> list[bytes]:
    return [v for t, v in fields if t == tag]


# -- channel -------------------------------------------------------------


class _Direction:
    __slots__ = ("queue",)

    def __init__(self):
        self.queue: deque[bytes] = deque()


class ChannelEndpoint:
    """One side of an in-process IDM channel.

    ``send`` appends encoded frames to the peer's receive queue; the number
    of frames sitting unreceived in that queue is this side's inflight count.
    """

    def __init__(self, side: str, inbox: _Direction, outbox: _Direction, channel: "Channel", budget: int):
        self.side = side
        self._inbox = inbox
        self._outbox = outbox
        self._channel = channel
        self.inflight_budget = budget

    @property
    def inflight(self) -> int:
        return len(self._outbox.queue)

    @property
    def closed(self) -> bool:
        return self._channel.closed

    def send(self, frame: Union[Frame, bytes]) -> None:
        if self._channel.closed:
            raise ChannelClosed(f"{self.side} endpoint: channel closed")
        data = frame.encode() if isinstance(frame, Frame) else bytes(frame)
        if len(self._outbox.queue) >= self.inflight_budget:
            raise Backpressure(f"{self.inflight_budget} frames unacknowledged")
        self._outbox.queue.append(data)

    def recv(self) -> Optional[bytes]:
        if self._channel.closed:
            raise ChannelClosed(f"{self.side} endpoint: channel closed")
        if not self._inbox.queue:
            return None
        return self._inbox.queue.popleft()

    def recv_frame(self) -> Optional[Frame]:
        data = self.recv()
        if data is None:
            return None
        frame, _ = decode_frame(data)
        return frame

    def close(self) -> None:
        self._channel.close()


class Channel:
    """Bidirectional channel between the daemon and one zone."""

    def __init__(self, budget: int = DEFAULT_INFLIGHT):
        if budget < 1:
            raise ValueError("inflight budget must be positive")
        to_zone, to_daemon = _Direction(), _Direction()
        self.closed = False
        self.daemon = ChannelEndpoint("daemon", to_daemon, to_zone, self, budget)
        self.zone = ChannelEndpoint("zone", to_zone, to_daemon, self, budget)

    def close(self) -> None:
        self.closed = True
