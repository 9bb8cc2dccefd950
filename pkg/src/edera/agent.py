"""The in-zone init agent.

Runs inside every zone: emits heartbeats and queued monitor events over the
zone's IDM endpoint, executes commands relayed by the daemon against a
simulated process table, and (in driver zones) answers device requests.
Everything is driven by :meth:`InitAgent.tick` under an injected clock.
"""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import Backpressure
from .idm import Frame, MsgType, Tag, tlv_all, tlv_decode, tlv_encode, tlv_get
from .zone import ZoneId

OUTPUT_CHUNK = 32 * 1024
MAX_DETAIL = 4096
EXIT_NOT_FOUND = 127

CommandFn = Callable[[list[str], bytes], tuple[int, bytes, bytes]]
DeviceHandler = Callable[[list[tuple[int, bytes]]], list[tuple[int, bytes]]]


class MonitorKind(enum.IntEnum):
    PROCESS_START = 1
    PROCESS_EXIT = 2
    RESOURCE_PRESSURE = 3
    PAGETABLE_FAULT_OBSERVED = 4
    CUSTOM = 5


@dataclass(frozen=True)
class MonitorEvent:
    kind: MonitorKind
    detail: str
    at: float

    def __post_init__(self):
        if len(self.detail.encode()) > MAX_DETAIL:
            raise ValueError("event detail exceeds 4 KiB")

    def payload(self) -> bytes:
        return tlv_encode(
            [
                (Tag.EVENT_KIND, bytes([self.kind])),
                (Tag.DETAIL, self.detail.encode()),
                (Tag.AT, struct.pack(">d", self.at)),
            ]
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> "MonitorEvent":
        fields = tlv_decode(payload)
        (at,) = struct.unpack(">d", tlv_get(fields, Tag.AT, struct.pack(">d", 0.0)))
        return cls(
            MonitorKind(tlv_get(fields, Tag.EVENT_KIND)[0]),
            tlv_get(fields, Tag.DETAIL, b"").decode(errors="replace"),
            at,
        )


@dataclass(frozen=True)
class AgentConfig:
    zone_id: ZoneId
    heartbeat_interval_ms: int = 500

    def __post_init__(self):
        if self.heartbeat_interval_ms < 10:
            raise ValueError("heartbeat_interval_ms must be >= 10")


def _echo(argv, stdin):
    return 0, (" ".join(argv[1:]) + "\n").encode(), b""


def _zeros(argv, stdin):
    try:
        n = int(argv[1])
    except (IndexError, ValueError):
        return 2, b"", b"usage: zeros BYTES\n"
    return 0, bytes(n), b""


def _crash(argv, stdin):
    return 139, b"", b"Segmentation fault\n"


DEFAULT_COMMANDS: dict[str, CommandFn] = {
    "echo": _echo,
    "true": lambda argv, stdin: (0, b"", b""),
    "false": lambda argv, stdin: (1, b"", b""),
    "sleep": lambda argv, stdin: (0, b"", b""),
    "cat": lambda argv, stdin: (0, bytes(stdin), b""),
    "crash": _crash,
    "zeros": _zeros,
}


def exec_request_payload(argv: list[str], stdin: bytes = b"") -> bytes:
    fields = []
    for arg in argv:
        raw = arg.encode()
        if len(raw) > 0xFFFF:
            raise ValueError("argument longer than 65535 bytes")
        fields.append((Tag.ARGV, raw))
    if stdin:
        fields.append((Tag.STDIN, stdin))
    return tlv_encode(fields)


def exit_code_of(frame: Frame) -> int:
    (code,) = struct.unpack(">i", tlv_get(tlv_decode(frame.payload), Tag.EXIT_CODE))
    return code


class InitAgent:
    def __init__(
        self,
        config: AgentConfig,
        endpoint,
        commands: Optional[dict[str, CommandFn]] = None,
        device_handler: Optional[DeviceHandler] = None,
    ):
        self.config = config
        self.endpoint = endpoint
        self.commands = dict(DEFAULT_COMMANDS if commands is None else commands)
        self.device_handler = device_handler
        self.enabled = True
        self.last_emit: Optional[float] = None
        self.heartbeat_seq = 0
        self.processes: list[dict] = []
        self._outbox: deque[Frame] = deque()
        self._kicked = False
        self._next_stream = 1
        self.device_replies: dict[int, list[tuple[int, bytes]]] = {}

    def post_event(self, event: MonitorEvent) -> None:
        if self.enabled:
            self._outbox.append(Frame(MsgType.EVENT, 0, event.payload()))

    def log(self, text: str) -> None:
        if self.enabled:
            self._outbox.append(Frame(MsgType.LOG, 0, tlv_encode([(Tag.LOG_TEXT, text.encode())])))

    def request_device(self, fields: list[tuple[int, bytes]]) -> int:
        """Queue a DeviceRequest from a workload in this zone; returns its stream id."""
        sid = self._next_stream
        self._next_stream += 1
        self._outbox.append(Frame(MsgType.DEVICE_REQUEST, sid, tlv_encode(fields)))
        return sid

    def disable(self) -> None:
        """Stop emitting anything, permanently. A second call is a no-op."""
        self.enabled = False
        self._outbox.clear()

    @property
    def pending(self) -> int:
        return len(self._outbox)

    def tick(self, now: float) -> list[Frame]:
        """Handle inbound requests and flush due frames; returns frames sent.

        At most one heartbeat goes out per call even if several intervals
        elapsed. On backpressure the unsent frames (heartbeat included) stay
        queued for the next tick.
        """
        if not self.enabled:
            return []
        self._drain_inbound()
        sent: list[Frame] = []
        due = (
            self._kicked
            or self.last_emit is None
            or now - self.last_emit >= self.config.heartbeat_interval_ms
        )
        if due:
            hb = Frame(
                MsgType.HEARTBEAT,
                0,
                tlv_encode(
                    [
                        (Tag.ZONE_ID, self.config.zone_id.encode()),
                        (Tag.SEQ, struct.pack(">Q", self.heartbeat_seq)),
                    ]
                ),
            )
            try:
                self.endpoint.send(hb)
            except Backpressure:
                return sent
            self.heartbeat_seq += 1
            self.last_emit = now
            self._kicked = False
            sent.append(hb)
        while self._outbox:
            try:
                self.endpoint.send(self._outbox[0])
            except Backpressure:
                break
            sent.append(self._outbox.popleft())
        return sent

    def exec(self, argv: list[str], stdin: bytes = b"", stream_id: int = 1) -> list[Frame]:
        """Run ``argv`` in the simulated process table.

        Output is queued as ExecOutput frames of at most 32 KiB of data each,
        followed by one ExitEvent; the queued frames are also returned.
        """
        if not argv:
            raise ValueError("command must be non-empty")
        fn = self.commands.get(argv[0])
        if fn is None:
            code, out, err = EXIT_NOT_FOUND, b"", f"{argv[0]}: command not found\n".encode()
        else:
            code, out, err = fn(list(argv), stdin)
        self.processes.append({"pid": len(self.processes) + 1, "argv": list(argv), "exit": code})
        frames = []
        for fd, data in ((1, out), (2, err)):
            for i in range(0, len(data), OUTPUT_CHUNK):
                payload = tlv_encode([(Tag.FD, bytes([fd])), (Tag.DATA, data[i : i + OUTPUT_CHUNK])])
                frames.append(Frame(MsgType.EXEC_OUTPUT, stream_id, payload))
        frames.append(Frame(MsgType.EXIT_EVENT, stream_id, tlv_encode([(Tag.EXIT_CODE, struct.pack(">i", code))])))
        if self.enabled:
            self._outbox.extend(frames)
        return frames

    def _drain_inbound(self) -> None:
        while True:
            frame = self.endpoint.recv_frame()
            if frame is None:
                return
            if frame.msg_type is MsgType.EXEC_REQUEST:
                fields = tlv_decode(frame.payload)
                argv = [a.decode(errors="replace") for a in tlv_all(fields, Tag.ARGV)]
                self.exec(argv or [""], tlv_get(fields, Tag.STDIN, b""), frame.stream_id)
            elif frame.msg_type is MsgType.DEVICE_REQUEST and self.device_handler is not None:
                reply = self.device_handler(tlv_decode(frame.payload))
                self._outbox.append(Frame(MsgType.DEVICE_REPLY, frame.stream_id, tlv_encode(reply)))
            elif frame.msg_type is MsgType.DEVICE_REPLY:
                self.device_replies[frame.stream_id] = tlv_decode(frame.payload)
            elif frame.msg_type is MsgType.EVENT:
                control = tlv_get(tlv_decode(frame.payload), Tag.CONTROL)
                if control == b"kick":
                    self._kicked = True
