"""Device attachments served by driver zones."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Any, Optional

from .idm import Tag, tlv_get
from .zone import ZoneId

DEFAULT_SLICE_BYTES = 4096

OP_READ = b"read"
OP_WRITE = b"write"

STATUS_OK = b"ok"
STATUS_DRIVER_UNAVAILABLE = b"driver_unavailable"
STATUS_NOT_BOUND = b"not_bound"
STATUS_BAD_REQUEST = b"bad_request"


class DeviceMode(str, enum.Enum):
    PASSTHROUGH = "passthrough"
    PARTITIONED = "partitioned"


@dataclass
class DeviceAttachment:
    device_id: str
    mode: DeviceMode
    driver_zone: ZoneId
    slices: dict[int, Optional[ZoneId]]
    slice_memory: list[bytearray] = field(default_factory=list)
    driver_alive: bool = True

    def __post_init__(self):
        if self.mode is DeviceMode.PASSTHROUGH and len(self.slices) != 1:
            raise ValueError("passthrough attachments have exactly one slice")
        if not self.slices:
            raise ValueError("an attachment needs at least one slice")

    @classmethod
    def new(cls, device_id: str, mode: DeviceMode, driver_zone: ZoneId, slices: int, slice_bytes: int) -> "DeviceAttachment":
        return cls(
            device_id,
            mode,
            driver_zone,
            {i: None for i in range(slices)},
            [bytearray(slice_bytes) for _ in range(slices)],
        )

    def slice_of(self, client: ZoneId) -> Optional[int]:
        for idx, holder in self.slices.items():
            if holder == client:
                return idx
        return None

    def wipe(self, idx: int) -> None:
        mem = self.slice_memory[idx]
        mem[:] = bytes(len(mem))

    def to_dict(self) -> dict[str, Any]:
        return {
            "device_id": self.device_id,
            "mode": self.mode.value,
            "driver_zone": self.driver_zone,
            "slices": {str(k): v for k, v in sorted(self.slices.items())},
            "slice_bytes": len(self.slice_memory[0]) if self.slice_memory else DEFAULT_SLICE_BYTES,
            "driver_alive": self.driver_alive,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DeviceAttachment":
        slices = {int(k): v for k, v in d["slices"].items()}
        # device memory does not survive a daemon restart; it comes back zeroed
        return cls(
            d["device_id"],
            DeviceMode(d["mode"]),
            d["driver_zone"],
            slices,
            [bytearray(d.get("slice_bytes", DEFAULT_SLICE_BYTES)) for _ in slices],
            d.get("driver_alive", True),
        )


def driver_handler(att: DeviceAttachment):
    """Build the request handler run by the driver zone's init agent."""

    def handle(fields: list[tuple[int, bytes]]) -> list[tuple[int, bytes]]:
        try:
            idx = struct.unpack(">I", tlv_get(fields, Tag.SLICE))[0]
            offset = struct.unpack(">I", tlv_get(fields, Tag.OFFSET, b"\0\0\0\0"))[0]
            mem = att.slice_memory[idx]
            op = tlv_get(fields, Tag.OP)
            if op == OP_WRITE:
                data = tlv_get(fields, Tag.DATA, b"")
                if offset + len(data) > len(mem):
                    return [(Tag.STATUS, STATUS_BAD_REQUEST)]
                mem[offset : offset + len(data)] = data
                return [(Tag.STATUS, STATUS_OK)]
            if op == OP_READ:
                length = struct.unpack(">I", tlv_get(fields, Tag.LENGTH, b"\0\0\0\0"))[0]
                if offset + length > len(mem):
                    return [(Tag.STATUS, STATUS_BAD_REQUEST)]
                return [(Tag.STATUS, STATUS_OK), (Tag.DATA, bytes(mem[offset : offset + length]))]
        except (TypeError, IndexError, struct.error):
            pass
        return [(Tag.STATUS, STATUS_BAD_REQUEST)]

    return handle
