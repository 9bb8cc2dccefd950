from __future__ import annotations

import io
import json
import random
import zlib
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from edera import errors
from edera.errors import (
    Backpressure,
    BadMagic,
    ChannelClosed,
    CrcMismatch,
    FrameTooLarge,
    IdmError,
    MalformedPayload,
    PayloadTooLarge,
)
from edera.idm import (
    MAX_PAYLOAD,
    Channel,
    Frame,
    MsgType,
    Tag,
    decode_frame,
    encode_frame,
    read_frame,
    tlv_all,
    tlv_decode,
    tlv_encode,
    tlv_get,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "idm_vectors.json").read_text())


def test_reference_crc_check_value():
    # the golden file's bitwise CRC and zlib agree on the standard check value
    assert GOLDEN["crc32_check"]["crc"] == "cbf43926"
    assert zlib.crc32(b"123456789") == 0xCBF43926


def test_empty_heartbeat_bytes():
    header = bytes.fromhex("ed7a0101" "00000000" "00000000")
    assert encode_frame(MsgType.HEARTBEAT, 0, b"") == header + zlib.crc32(header).to_bytes(4, "big")


@pytest.mark.parametrize("vec", GOLDEN["valid"], ids=lambda v: v["name"])
def test_golden_valid(vec):
    payload = bytes.fromhex(vec["payload"])
    raw = bytes.fromhex(vec["hex"])
    assert encode_frame(vec["msg_type"], vec["stream_id"], payload) == raw
    frame, used = decode_frame(raw)
    assert used == len(raw) == 16 + len(payload)
    assert (int(frame.msg_type), frame.stream_id, frame.payload) == (vec["msg_type"], vec["stream_id"], payload)


@pytest.mark.parametrize("vec", GOLDEN["invalid"], ids=lambda v: v["name"])
def test_golden_invalid(vec):
    with pytest.raises(getattr(errors, vec["error"])):
        decode_frame(bytes.fromhex(vec["hex"]))


def test_payload_bound_on_encode():
    encode_frame(MsgType.LOG, 0, bytes(MAX_PAYLOAD))
    with pytest.raises(PayloadTooLarge):
        encode_frame(MsgType.LOG, 0, bytes(MAX_PAYLOAD + 1))


def test_bad_magic_and_flipped_crc():
    with pytest.raises(BadMagic):
        decode_frame(b"\xff\xff" + bytes(14))
    raw = bytearray(encode_frame(MsgType.EVENT, 3, b"abc"))
    raw[-1] ^= 0xFF
    with pytest.raises(CrcMismatch):
        decode_frame(bytes(raw))


class CountingReader:
    def __init__(self, data: bytes):
        self._buf = io.BytesIO(data)
        self.consumed = 0

    def read(self, n: int) -> bytes:
        chunk = self._buf.read(n)
        self.consumed += len(chunk)
        return chunk


def test_oversize_rejected_before_payload_is_read():
    header = b"\xed\x7a\x01\x01" + (0).to_bytes(4, "big") + (2 << 20).to_bytes(4, "big")
    reader = CountingReader(header + bytes(2 << 20))
    with pytest.raises(FrameTooLarge):
        read_frame(reader.read)
    assert reader.consumed == 12
    # the header alone is enough for the in-memory decoder as well
    with pytest.raises(FrameTooLarge):
        decode_frame(header)


def test_read_frame_stream():
    frames = [Frame(MsgType.EXEC_OUTPUT, i, bytes([i]) * i) for i in range(5)]
    reader = CountingReader(b"".join(f.encode() for f in frames))
    assert [read_frame(reader.read) for _ in range(5)] == frames
    assert read_frame(reader.read) is None


def random_frame(rng: random.Random) -> Frame:
    size = rng.choice([0, 1, 2, 100, 4096, rng.randint(0, 70000)])
    return Frame(rng.choice(list(MsgType)), rng.getrandbits(32), rng.randbytes(size))


def test_roundtrip_1000_random_frames():
    rng = random.Random(5)
    for _ in range(1000):
        f = random_frame(rng)
        raw = f.encode()
        assert len(raw) == 16 + len(f.payload)
        g, used = decode_frame(raw + b"trailing")
        assert g == f and used == len(raw)


def fuzz_corpus(n: int, seed: int = 0) -> list[bytes]:
    rng = random.Random(seed)
    seeds = [Frame(t, rng.getrandbits(32), rng.randbytes(rng.randint(0, 64))).encode() for t in MsgType]
    out = []
    for i in range(n):
        base = bytearray(rng.choice(seeds))
        mode = i % 6
        if mode == 0:
            out.append(rng.randbytes(rng.randint(0, 64)))
        elif mode == 1:
            for _ in range(rng.randint(1, 4)):
                pos = rng.randrange(len(base))
                base[pos] ^= 1 << rng.randrange(8)
            out.append(bytes(base))
        elif mode == 2:
            out.append(bytes(base[: rng.randrange(len(base))]))
        elif mode == 3:
            base[8:12] = rng.getrandbits(32).to_bytes(4, "big")
            out.append(bytes(base))
        elif mode == 4:
            base[3] = rng.randrange(256)
            out.append(bytes(base))
        else:
            out.append(bytes(base) + rng.randbytes(rng.randint(0, 8)))
    return out


def test_fuzz_10k_inputs_never_crash():
    outcomes = {}
    for data in fuzz_corpus(10_000):
        try:
            frame, used = decode_frame(data)
            assert used <= len(data)
            kind = "ok"
        except IdmError as e:
            kind = type(e).__name__
        outcomes[kind] = outcomes.get(kind, 0) + 1
        reader = CountingReader(data)
        try:
            read_frame(reader.read)
        except IdmError:
            pass
    assert sum(outcomes.values()) == 10_000
    assert {"ok", "CrcMismatch", "Truncated"} <= set(outcomes)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_decode_arbitrary_bytes(data):
    try:
        decode_frame(data)
    except IdmError:
        pass


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 255), st.binary(max_size=300)), max_size=10))
def test_tlv_roundtrip(fields):
    assert tlv_decode(tlv_encode(fields)) == fields


def test_tlv_long_values_split_and_rejoin():
    value = bytes(range(256)) * 300
    fields = tlv_decode(tlv_encode([(Tag.DATA, value)]))
    assert len(fields) == 2 and tlv_get(fields, Tag.DATA) == value
    assert tlv_all(tlv_decode(tlv_encode([(Tag.ARGV, b"a"), (Tag.ARGV, b"b")])), Tag.ARGV) == [b"a", b"b"]
    with pytest.raises(MalformedPayload):
        tlv_decode(b"\x01\x00\x05ab")


def test_channel_budget_and_fifo():
    ch = Channel()
    f = [Frame(MsgType.LOG, i, b"x") for i in range(65)]
    for fr in f[:64]:
        ch.zone.send(fr)
    assert ch.zone.inflight == 64
    with pytest.raises(Backpressure):
        ch.zone.send(f[64])
    assert ch.daemon.recv() == f[0].encode()
    ch.zone.send(f[64])
    got = [ch.daemon.recv_frame() for _ in range(64)]
    assert got == f[1:]
    assert ch.daemon.recv() is None


def test_channel_close():
    ch = Channel()
    ch.close()
    with pytest.raises(ChannelClosed):
        ch.zone.send(Frame(MsgType.HEARTBEAT, 0))
