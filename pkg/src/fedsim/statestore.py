"""Disk-backed per-client state manager.

K executor devices simulate M >> K stateful clients by loading a client's
state right before its task and persisting the updated state right after,
so at most K states are ever resident at once while all M live on disk.

On-disk layout, one file per client (`client_<id>.state`), little-endian:

    offset  size  field
    0       4     magic "FSST"
    4       2     format version (1)
    6       2     reserved (0)
    8       4     client_id (u32)
    12      4     round_written (u32)
    16      8     payload length in bytes (u64)
    24      4     CRC-32 of the payload (u32)
    28      ...   payload

The payload is a tensor map:

    u32 entry count, then per entry:
        u16 name length, UTF-8 name bytes,
        u8 ndim, u64 x ndim dimension sizes,
        float64 x prod(dims) tensor data

Writes go to a temp file, are fsynced, then atomically renamed over the
final path; the directory entry is fsynced too, so a committed save survives
a crash. Loads verify the checksum and never silently substitute a default.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

MAGIC = b"FSST"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIQI")  # magic, version, reserved, client, round, len, crc


class StaleWriteError(RuntimeError):
    """A save_state call went backwards in rounds; signals a scheduling bug."""


class CorruptRecordError(RuntimeError):
    """Magic/version/checksum mismatch on a state file."""


@dataclass(frozen=True)
class ClientState:
    client_id: int
    round_written: int  # -1 for a default state that was never persisted
    payload: dict[str, np.ndarray]


@dataclass(frozen=True)
class StateStoreStats:
    bytes_on_disk: int
    live_cache_entries: int
    loads: int
    saves: int
    peak_live_entries: int


def encode_tensor_map(payload: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named float64 tensors; bit-exact round trip with decode."""
    parts = [struct.pack("<I", len(payload))]
    for name, tensor in payload.items():
        raw = name.encode("utf-8")
        arr = np.asarray(tensor, dtype="<f8")  # asarray keeps 0-d shapes intact
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensor_map(blob: bytes, offset: int = 0) -> tuple[dict[str, np.ndarray], int]:
    """Inverse of encode_tensor_map; returns (payload, next offset)."""
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    payload: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset: offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        payload[name] = arr.copy()  # own the memory; blob may be reused
    return payload, offset


def tensor_map_data_bytes(payload: Mapping[str, np.ndarray]) -> int:
    """Tensor data bytes only (8 per element); names/shapes are headers."""
    return sum(8 * int(np.asarray(t).size) for t in payload.values())


class StateStore:
    """One directory of per-client state files; see module docstring for layout.

    Safe for concurrent use from K executor threads as long as no client id
    is handled by two devices at once (the engine's scheduling contract);
    counter updates and the per-client round table are lock-protected anyway.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._last_round: dict[int, int] = {}
        self._loads = 0
        self._saves = 0
        self._live: set[int] = set()
        self._peak_live = 0
        for path in self.root.glob("client_*.state"):
            cid, rnd, _, _ = self._read_header(path)
            self._last_round[cid] = rnd

    def _path(self, client_id: int) -> Path:
        return self.root / f"client_{client_id:08d}.state"

    @staticmethod
    def _read_header(path: Path) -> tuple[int, int, int, int]:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CorruptRecordError(f"{path}: truncated header")
        magic, version, _, cid, rnd, length, crc = _HEADER.unpack(head)
        if magic != MAGIC or version != VERSION:
            raise CorruptRecordError(f"{path}: bad magic or version")
        return cid, rnd, length, crc

    def load(self, client_id: int,
             default_factory: Callable[[], Mapping[str, np.ndarray]] | None = None,
             ) -> ClientState | None:
        """Most recently saved state for the client, byte-exact.

        Never-saved clients get `default_factory()` at round_written = -1
        (or None when no factory is given). Checksum failures raise
        CorruptRecordError rather than defaulting.
        """
        path = self._path(client_id)
        if not path.exists():
            if default_factory is None:
                return None
            with self._lock:
                self._track_checkout(client_id)
            return ClientState(client_id, -1, dict(default_factory()))
        cid, rnd, length, crc = self._read_header(path)
        if cid != client_id:
            raise CorruptRecordError(f"{path}: header claims client {cid}")
        with open(path, "rb") as fh:
            fh.seek(_HEADER.size)
            blob = fh.read(length)
        if len(blob) != length or zlib.crc32(blob) != crc:
            raise CorruptRecordError(f"{path}: payload checksum mismatch")
        payload, _ = decode_tensor_map(blob)
        with self._lock:
            self._loads += 1
            self._track_checkout(client_id)
        return ClientState(client_id, rnd, payload)

    def _track_checkout(self, client_id: int) -> None:
        self._live.add(client_id)
        self._peak_live = max(self._peak_live, len(self._live))

    def save(self, client_id: int, round_num: int,
             payload: Mapping[str, np.ndarray]) -> None:
        """Durably replace the client's record; rejects non-increasing rounds."""
        with self._lock:
            prev = self._last_round.get(client_id, -1)
            if round_num <= prev:
                raise StaleWriteError(
                    f"client {client_id}: save at round {round_num} after round {prev}")
        blob = encode_tensor_map(payload)
        head = _HEADER.pack(MAGIC, VERSION, 0, client_id, round_num,
                            len(blob), zlib.crc32(blob))
        path = self._path(client_id)
        tmp = path.with_suffix(".tmp")
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            os.write(fd, head)
            os.write(fd, blob)
            os.fsync(fd)
        finally:
            os.close(fd)
        os.replace(tmp, path)
        dirfd = os.open(self.root, os.O_RDONLY)
        try:
            os.fsync(dirfd)
        finally:
            os.close(dirfd)
        with self._lock:
            self._last_round[client_id] = round_num
            self._saves += 1
            self._live.discard(client_id)

    def stats(self) -> StateStoreStats:
        with self._lock:
            total = sum(p.stat().st_size for p in self.root.glob("client_*.state"))
            return StateStoreStats(bytes_on_disk=total,
                                   live_cache_entries=len(self._live),
                                   loads=self._loads, saves=self._saves,
                                   peak_live_entries=self._peak_live)
