from __future__ import annotations

import random
import struct
import zlib

import pytest

from edera.errors import NamespaceViolation, NoSuchKey, StoreUnavailable
from edera.store import FILE_MAGIC, ZoneStore


def oracle_record(op: int, key: str, value: bytes = b"") -> bytes:
    k = key.encode()
    body = bytes([op]) + struct.pack(">II", len(k), len(value)) + k + value
    return body + struct.pack(">I", zlib.crc32(body))


def test_on_disk_layout(tmp_path):
    s = ZoneStore(tmp_path / "s.log")
    s.put("a", b"xy")
    s.delete("a")
    s.close()
    data = (tmp_path / "s.log").read_bytes()
    assert data == FILE_MAGIC + oracle_record(1, "a", b"xy") + oracle_record(2, "a")


def test_put_crash_reopen(tmp_path):
    s = ZoneStore(tmp_path / "s.log")
    s.put("zone/1", b"v1")
    s.crash()
    with pytest.raises(StoreUnavailable):
        s.get("zone/1")
    s.open()
    assert s.get("zone/1") == b"v1"


def test_list_sorted_and_missing_key(tmp_path):
    s = ZoneStore(tmp_path / "s.log")
    for k in ("zone/c", "zone/a", "zone/b", "pod/x"):
        s.put(k, b"")
    assert s.list("zone/") == ["zone/a", "zone/b", "zone/c"]
    with pytest.raises(NoSuchKey):
        s.get("nope")
    with pytest.raises(NoSuchKey):
        s.delete("nope")


def test_not_a_store_file(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"hello world, not a log")
    with pytest.raises(StoreUnavailable):
        ZoneStore(p)


def test_compaction_preserves_map(tmp_path):
    s = ZoneStore(tmp_path / "s.log")
    for i in range(50):
        s.put(f"k{i % 7}", str(i).encode())
    s.delete("k3")
    before = dict(s.items())
    size = (tmp_path / "s.log").stat().st_size
    s.compact()
    assert (tmp_path / "s.log").stat().st_size < size
    s.put("after", b"1")
    s.close()
    s.open()
    assert dict(s.items()) == {**before, "after": b"1"}


def test_scoped_handle():
    s = ZoneStore(None)
    h = s.scoped("zone/a/")
    h.put("zone/a/x", b"1")
    assert h.get("zone/a/x") == b"1" and h.list() == ["zone/a/x"]
    for bad in (lambda: h.get("zone/b/x"), lambda: h.put("zone/a", b""), lambda: h.list("zone/")):
        with pytest.raises(NamespaceViolation):
            bad()


def build_log(rng: random.Random, n: int):
    """Random op sequence; returns encoded records and the map after each one."""
    model: dict[str, bytes] = {}
    records, snapshots = [], [dict()]
    for _ in range(n):
        key = f"zone/{rng.randrange(8)}"
        if model and rng.random() < 0.25:
            key = rng.choice(sorted(model))
            records.append(oracle_record(2, key))
            del model[key]
        else:
            val = rng.randbytes(rng.randint(0, 40))
            records.append(oracle_record(1, key, val))
            model[key] = val
        snapshots.append(dict(model))
    return records, snapshots


def test_recovery_at_100_crash_points(tmp_path):
    rng = random.Random(3)
    records, snapshots = build_log(rng, 60)
    full = FILE_MAGIC + b"".join(records)
    bounds = [len(FILE_MAGIC)]
    for r in records:
        bounds.append(bounds[-1] + len(r))
    for i in range(100):
        cut = rng.randint(len(FILE_MAGIC), len(full))
        p = tmp_path / f"crash{i}.log"
        p.write_bytes(full[:cut])
        committed = max(j for j, b in enumerate(bounds) if b <= cut)
        s = ZoneStore(p)
        assert dict(s.items()) == snapshots[committed]
        assert p.stat().st_size == bounds[committed]
        s.close()


def test_store_writes_match_oracle_log(tmp_path):
    rng = random.Random(9)
    records, snapshots = build_log(rng, 40)
    s = ZoneStore(tmp_path / "s.log", fsync=False)
    for raw in records:
        op = raw[0]
        klen = struct.unpack(">I", raw[1:5])[0]
        vlen = struct.unpack(">I", raw[5:9])[0]
        key = raw[9 : 9 + klen].decode()
        if op == 1:
            s.put(key, raw[9 + klen : 9 + klen + vlen])
        else:
            s.delete(key)
    s.close()
    assert (tmp_path / "s.log").read_bytes() == FILE_MAGIC + b"".join(records)


def test_corrupt_middle_record_truncates_there(tmp_path):
    p = tmp_path / "s.log"
    recs = [oracle_record(1, f"k{i}", b"v") for i in range(3)]
    data = bytearray(FILE_MAGIC + b"".join(recs))
    data[len(FILE_MAGIC) + len(recs[0]) + 10] ^= 0xFF
    p.write_bytes(bytes(data))
    s = ZoneStore(p)
    assert s.list() == ["k0"]
    assert p.stat().st_size == len(FILE_MAGIC) + len(recs[0])
