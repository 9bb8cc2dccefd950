"""Embedded append-only key-value store backing the zone daemon.

On-disk format (integers big-endian)::

    file   := header record*
    header := b"EDKVLOG1"
    record := op:u8 key_len:u32 val_len:u32 key val crc:u32

``op`` is 0x01 (put) or 0x02 (delete, ``val_len`` = 0). ``crc`` is the
IEEE CRC-32 of every preceding byte of the record. Recovery replays records
in order and truncates the file at the first incomplete or corrupt record.
Compaction writes a snapshot of live keys to a temporary file and renames
it over the log.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Iterator, Optional, Union

from .errors import NamespaceViolation, NoSuchKey, StoreUnavailable

log = logging.getLogger(__name__)

FILE_MAGIC = b"EDKVLOG1"
OP_PUT = 0x01
OP_DELETE = 0x02
REC_HEAD = struct.Struct(">BII")
MAX_KEY = 0xFFFF
MAX_VALUE = 16 << 20


def encode_record(op: int, key: str, value: bytes = b"") -> bytes:
    k = key.encode()
    if len(k) > MAX_KEY:
        raise ValueError("key too long")
    if len(value) > MAX_VALUE:
        raise ValueError("value too large")
    body = REC_HEAD.pack(op, len(k), len(value)) + k + value
    return body + struct.pack(">I", zlib.crc32(body))


def scan_records(data: bytes) -> tuple[list[tuple[int, str, bytes]], int]:
    """Parse records after the header; returns (records, end of last good one)."""
    records = []
    pos = len(FILE_MAGIC)
    n = len(data)
    while pos + REC_HEAD.size <= n:
        op, klen, vlen = REC_HEAD.unpack_from(data, pos)
        if op not in (OP_PUT, OP_DELETE) or klen > MAX_KEY or vlen > MAX_VALUE:
            break
        end = pos + REC_HEAD.size + klen + vlen + 4
        if end > n:
            break
        body = data[pos : end - 4]
        (crc,) = struct.unpack_from(">I", data, end - 4)
        if zlib.crc32(body) != crc:
            break
        kstart = pos + REC_HEAD.size
        try:
            key = data[kstart : kstart + klen].decode()
        except UnicodeDecodeError:
            break
        records.append((op, key, bytes(data[kstart + klen : kstart + klen + vlen])))
        pos = end
    return records, pos


class ZoneStore:
    """Durable string -> bytes map. ``path=None`` keeps it memory-only."""

    def __init__(self, path: Union[str, Path, None], fsync: bool = True):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self._map: dict[str, bytes] = {}
        self._fh = None
        self._open = False
        self.offset = 0
        self.open()

    # -- lifecycle -------------------------------------------------------

    def open(self) -> None:
        self._map = {}
        if self.path is None:
            self._open = True
            return
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            data = self.path.read_bytes() if self.path.exists() else b""
        except OSError as e:
            raise StoreUnavailable(str(e)) from e
        if len(data) < len(FILE_MAGIC):
            if data and not FILE_MAGIC.startswith(data):
                raise StoreUnavailable(f"{self.path}: not a store file")
            data = FILE_MAGIC
            self.path.write_bytes(data)
        elif not data.startswith(FILE_MAGIC):
            raise StoreUnavailable(f"{self.path}: not a store file")
        records, good = scan_records(data)
        for op, key, value in records:
            if op == OP_PUT:
                self._map[key] = value
            else:
                self._map.pop(key, None)
        if good < len(data):
            log.warning("discarding %d trailing bytes of %s", len(data) - good, self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(good)
        self._fh = open(self.path, "ab")
        self.offset = good
        self._open = True

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        self._open = False

    def crash(self) -> None:
        """Drop all in-memory state as an abrupt process death would."""
        self.close()
        self._map = {}

    @property
    def is_open(self) -> bool:
        return self._open

    # -- operations ------------------------------------------------------

    def put(self, key: str, value: bytes) -> None:
        self._append(encode_record(OP_PUT, key, bytes(value)))
        self._map[key] = bytes(value)

    def delete(self, key: str) -> None:
        if key not in self._require_open():
            raise NoSuchKey(key)
        self._append(encode_record(OP_DELETE, key))
        del self._map[key]

    def get(self, key: str) -> bytes:
        try:
            return self._require_open()[key]
        except KeyError:
            raise NoSuchKey(key) from None

    def list(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self._require_open() if k.startswith(prefix))

    def items(self, prefix: str = "") -> Iterator[tuple[str, bytes]]:
        for k in self.list(prefix):
            yield k, self._map[k]

    def __contains__(self, key: str) -> bool:
        return key in self._require_open()

    def __len__(self) -> int:
        return len(self._require_open())

    def compact(self) -> None:
        self._require_open()
        if self.path is None:
            return
        tmp = self.path.with_name(self.path.name + ".compact")
        with open(tmp, "wb") as fh:
            fh.write(FILE_MAGIC)
            for k in sorted(self._map):
                fh.write(encode_record(OP_PUT, k, self._map[k]))
            fh.flush()
            os.fsync(fh.fileno())
        self._fh.close()
        os.replace(tmp, self.path)
        self._fh = open(self.path, "ab")
        self.offset = self.path.stat().st_size

    def scoped(self, prefix: str) -> "ScopedStoreHandle":
        return ScopedStoreHandle(self, prefix)

    # -- internals -------------------------------------------------------

    def _require_open(self) -> dict[str, bytes]:
        if not self._open:
            raise StoreUnavailable("store is closed")
        return self._map

    def _append(self, record: bytes) -> None:
        self._require_open()
        if self._fh is None:
            return
        try:
            self._fh.write(record)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as e:
            raise StoreUnavailable(str(e)) from e
        self.offset += len(record)


class ScopedStoreHandle:
    """A store handle confined to keys under one prefix.

    This is what a zone would hold if a daemon store handle leaked into it:
    keys are opaque strings with no path semantics, and anything outside the
    prefix is refused.
    """

    def __init__(self, store: ZoneStore, prefix: str):
        if not prefix:
            raise ValueError("scope prefix must be non-empty")
        self._store = store
        self.prefix = prefix

    def _check(self, key: str) -> str:
        if not key.startswith(self.prefix):
            raise NamespaceViolation(f"key {key!r} outside {self.prefix!r}")
        return key

    def get(self, key: str) -> bytes:
        return self._store.get(self._check(key))

    def put(self, key: str, value: bytes) -> None:
        self._store.put(self._check(key), value)

    def delete(self, key: str) -> None:
        self._store.delete(self._check(key))

    def list(self, prefix: Optional[str] = None) -> list[str]:
        return self._store.list(self._check(self.prefix if prefix is None else prefix))
