"""Regenerate idm_vectors.json. Shares no code with the package: frames are
assembled by hand and the CRC is a bitwise CRC-32 (reflected 0xEDB88320)."""

from __future__ import annotations

import json
from pathlib import Path


def crc32(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for b in data:
        crc ^= b
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def be(n: int, width: int) -> bytes:
    return n.to_bytes(width, "big")


def tlv(*fields: tuple[int, bytes]) -> bytes:
    return b"".join(bytes([t]) + be(len(v), 2) + v for t, v in fields)


def frame(msg_type: int, stream: int, payload: bytes, magic=b"\xed\x7a", version=1, declared=None) -> bytes:
    body = magic + bytes([version, msg_type]) + be(stream, 4) + be(len(payload) if declared is None else declared, 4) + payload
    return body + be(crc32(body), 4)


ZONE = b"3f2b8c1e-9a47-4d21-8e6f-0c5a9b7d1e42"

VALID = [
    ("heartbeat", 0x01, 0, tlv((0x01, ZONE), (0x02, be(7, 8)))),
    ("event-empty", 0x02, 0, b""),
    ("exec-request", 0x03, 1, tlv((0x20, b"echo"), (0x20, b"hi"))),
    ("exec-output", 0x04, 1, tlv((0x22, b"\x01"), (0x23, b"hi\n"))),
    ("exit-negative", 0x05, 1, tlv((0x24, be(0xFFFFFFFF, 4)))),
    ("log", 0x06, 0, tlv((0x30, "zone ready ✓".encode()))),
    ("device-request", 0x07, 0xFFFFFFFF, tlv((0x40, b"gpu0"), (0x41, b"read"), (0x43, be(0, 4)), (0x44, be(16, 4)))),
    ("device-reply", 0x08, 42, tlv((0x45, b"ok"), (0x23, bytes(range(16))))),
]


def invalid() -> list[dict]:
    good = frame(0x01, 0, tlv((0x01, ZONE)))
    flipped = bytearray(good)
    flipped[14] ^= 0x01
    return [
        {"name": "bad-magic", "hex": frame(0x01, 0, b"", magic=b"\xed\x7b").hex(), "error": "BadMagic"},
        {"name": "bad-version", "hex": frame(0x01, 0, b"", version=2).hex(), "error": "BadVersion"},
        {"name": "oversize-declared", "hex": frame(0x01, 0, b"", declared=(1 << 20) + 1)[:12].hex(), "error": "FrameTooLarge"},
        {"name": "truncated", "hex": good[:-1].hex(), "error": "Truncated"},
        {"name": "crc-mismatch", "hex": bytes(flipped).hex(), "error": "CrcMismatch"},
        {"name": "unknown-type", "hex": frame(0x09, 0, b"").hex(), "error": "UnknownType"},
    ]


def main() -> None:
    doc = {
        "crc32_check": {"input": "123456789", "crc": f"{crc32(b'123456789'):08x}"},
        "valid": [
            {"name": n, "msg_type": t, "stream_id": s, "payload": p.hex(), "hex": frame(t, s, p).hex()}
            for n, t, s, p in VALID
        ],
        "invalid": invalid(),
    }
    out = Path(__file__).with_name("idm_vectors.json")
    out.write_text(json.dumps(doc, indent=2) + "\n")


if __name__ == "__main__":
    main()
