"""On-disk store of materialized KV caches, one flat file per chunk.

File format (``<chunk_id>.matkv``), all integers little-endian:

    offset  size  field
    0       6     magic ``MATKV1``
    6       2     format_version (u16, currently 1)
    8       8     config_hash (u64)
    16      4     n_layers (u32)
    20      4     n_heads (u32)
    24      4     head_dim (u32)
    28      4     n_tokens (u32)
    32      1     dtype_code (u8, 0 = float32 little-endian)
    33      4     payload_checksum (u32, CRC-32 of the payload)
    37      4     header_checksum (u32, CRC-32 of bytes 0..40 with this
                  field zeroed)
    41      ...   payload: keys then values, each laid out
                  [n_layers][n_tokens][n_heads][head_dim] in row-major order

Payload length is always 2 * n_layers * n_tokens * n_heads * head_dim * 4
bytes. Both CRC-32 checksums (IEEE polynomial, as in zlib) are verified on
load, so any single-bit flip in header or payload is reported as corruption.
Writes go through a temp file plus atomic rename, so a crash mid-store never
leaves a partial ``.matkv`` visible.

Concurrent loads of any ids are safe. Store/delete of the *same* id must be
serialized by the caller; the store object itself is shareable.
"""

from __future__ import annotations

import os
import re
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BatchLoadError,
    ChunkNotFoundError,
    CorruptionError,
    FormatError,
    IncompatibilityError,
    PreconditionError,
    StorageError,
)
from .model import KvCache

MAGIC = b"MATKV1"
FORMAT_VERSION = 1
DTYPE_F32_LE = 0
FILE_SUFFIX = ".matkv"

_HEADER = struct.Struct("<6sHQIIIIBII")
HEADER_SIZE = _HEADER.size  # 41 bytes

_CHUNK_ID_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


def validate_chunk_id(chunk_id: str) -> str:
    if not _CHUNK_ID_RE.match(chunk_id):
        raise PreconditionError(
            f"chunk id {chunk_id!r} must match [A-Za-z0-9_-]{{1,64}}"
        )
    return chunk_id


@dataclass(frozen=True)
class KvFileHeader:
    config_hash: int
    n_layers: int
    n_heads: int
    head_dim: int
    n_tokens: int
    dtype_code: int = DTYPE_F32_LE
    format_version: int = FORMAT_VERSION

    @property
    def payload_bytes(self) -> int:
        return 2 * self.n_layers * self.n_tokens * self.n_heads * self.head_dim * 4

    def pack(self, payload_checksum: int) -> bytes:
        unchecked = _HEADER.pack(
            MAGIC,
            self.format_version,
            self.config_hash,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.n_tokens,
            self.dtype_code,
            payload_checksum,
            0,
        )
        header_checksum = zlib.crc32(unchecked)
        return unchecked[:-4] + struct.pack("<I", header_checksum)


def _parse_header(raw: bytes, source: str) -> tuple[KvFileHeader, int]:
    """Verify and decode a header; returns (header, payload_checksum)."""
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{source}: file shorter than the {HEADER_SIZE}-byte header")
    (magic, version, config_hash, n_layers, n_heads, head_dim, n_tokens,
     dtype_code, payload_checksum, header_checksum) = _HEADER.unpack(raw[:HEADER_SIZE])
    recomputed = zlib.crc32(raw[: HEADER_SIZE - 4] + b"\x00\x00\x00\x00")
    if recomputed != header_checksum:
        raise CorruptionError(
            f"{source}: header checksum mismatch "
            f"(stored {header_checksum:#010x}, computed {recomputed:#010x})"
        )
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    if dtype_code != DTYPE_F32_LE:
        raise FormatError(f"{source}: unsupported dtype code {dtype_code}")
    header = KvFileHeader(
        config_hash=config_hash,
        n_layers=n_layers,
        n_heads=n_heads,
        head_dim=head_dim,
        n_tokens=n_tokens,
        dtype_code=dtype_code,
        format_version=version,
    )
    return header, payload_checksum


@dataclass(frozen=True)
class StoreReceipt:
    bytes_written: int
    wall_time_s: float


@dataclass(frozen=True)
class StoreStats:
    files: int
    bytes: int
    per_chunk_bytes: dict


class KvStore:
    """Flat-directory store keyed by chunk id.

    When constructed with a ``config_hash``, caches from other model configs
    are rejected on both store and load.
    """

    def __init__(self, root: str | Path, config_hash: int | None = None,
                 create: bool = True):
        self.root = Path(root)
        self.config_hash = config_hash
        if create:
            try:
                self.root.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StorageError(f"cannot create store directory {self.root}: {exc}") from exc
        elif not self.root.is_dir():
            raise StorageError(f"store directory {self.root} does not exist")

    def path_for(self, chunk_id: str) -> Path:
        return self.root / f"{validate_chunk_id(chunk_id)}{FILE_SUFFIX}"

    def exists(self, chunk_id: str) -> bool:
        return self.path_for(chunk_id).is_file()

    def __contains__(self, chunk_id: str) -> bool:
        return self.exists(chunk_id)

    def store_kv(self, chunk_id: str, cache: KvCache) -> StoreReceipt:
        """Atomically write ``cache`` as ``<chunk_id>.matkv``, overwriting."""
        start = time.perf_counter()
        cache.validate()
        if cache.base_position != 0:
            raise PreconditionError(
                "only caches with base_position 0 are materialized; "
                f"got base_position {cache.base_position}"
            )
        if self.config_hash is not None and cache.config_hash != self.config_hash:
            raise IncompatibilityError(
                f"cache config_hash {cache.config_hash:#x} does not match "
                f"store's registered {self.config_hash:#x}"
            )
        n_layers, n_tokens, n_heads, head_dim = cache.keys.shape
        header = KvFileHeader(
            config_hash=cache.config_hash,
            n_layers=n_layers,
            n_heads=n_heads,
            head_dim=head_dim,
            n_tokens=n_tokens,
        )
        payload = (
            np.ascontiguousarray(cache.keys, dtype="<f4").tobytes()
            + np.ascontiguousarray(cache.values, dtype="<f4").tobytes()
        )
        blob = header.pack(zlib.crc32(payload)) + payload

        final = self.path_for(chunk_id)
        tmp = final.with_name(f".{final.name}.tmp.{os.getpid()}")
        try:
            with open(tmp, "wb") as fh:
                fh.write(blob)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, final)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise StorageError(f"failed to store chunk {chunk_id!r}: {exc}") from exc
        return StoreReceipt(bytes_written=len(blob), wall_time_s=time.perf_counter() - start)

    def load_kv(self, chunk_id: str) -> KvCache:
        """Load and checksum-verify the cache stored for ``chunk_id``."""
        path = self.path_for(chunk_id)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise ChunkNotFoundError(f"no materialized cache for chunk {chunk_id!r}") from None
        except OSError as exc:
            raise StorageError(f"failed to read chunk {chunk_id!r}: {exc}") from exc

        header, payload_checksum = _parse_header(raw, str(path))
        payload = raw[HEADER_SIZE:]
        if len(payload) != header.payload_bytes:
            raise FormatError(
                f"{path}: payload is {len(payload)} bytes but header implies "
                f"{header.payload_bytes}"
            )
        computed = zlib.crc32(payload)
        if computed != payload_checksum:
            raise CorruptionError(
                f"{path}: payload checksum mismatch "
                f"(stored {payload_checksum:#010x}, computed {computed:#010x})"
            )
        if self.config_hash is not None and header.config_hash != self.config_hash:
            raise IncompatibilityError(
                f"{path}: config_hash {header.config_hash:#x} does not match "
                f"store's registered {self.config_hash:#x}"
            )
        shape = (header.n_layers, header.n_tokens, header.n_heads, header.head_dim)
        half = header.payload_bytes // 2
        keys = np.frombuffer(payload[:half], dtype="<f4").reshape(shape).astype(
            np.float32, copy=True
        )
        values = np.frombuffer(payload[half:], dtype="<f4").reshape(shape).astype(
            np.float32, copy=True
        )
        return KvCache(
            config_hash=header.config_hash, keys=keys, values=values, base_position=0
        )

    def load_many(self, chunk_ids: Sequence[str], parallelism: int = 4) -> list[KvCache]:
        """Load several chunks with bounded concurrency; results in input order."""
        if parallelism < 1:
            raise PreconditionError(f"parallelism must be >= 1, got {parallelism}")
        ids = [validate_chunk_id(c) for c in chunk_ids]
        if not ids:
            return []
        if parallelism == 1 or len(ids) == 1:
            results: list[KvCache | None] = []
            failures = {}
            for chunk_id in ids:
                try:
                    results.append(self.load_kv(chunk_id))
                except StorageError as exc:
                    failures[chunk_id] = exc
                    results.append(None)
            if failures:
                raise BatchLoadError(failures)
            return results  # type: ignore[return-value]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(self.load_kv, chunk_id) for chunk_id in ids]
        failures = {}
        out = []
        for chunk_id, future in zip(ids, futures):
            exc = future.exception()
            if exc is not None:
                failures[chunk_id] = exc
            else:
                out.append(future.result())
        if failures:
            raise BatchLoadError(failures)
        return out

    def delete_kv(self, chunk_id: str) -> bool:
        """Remove the chunk's file; True iff a file existed. Idempotent."""
        path = self.path_for(chunk_id)
        try:
            path.unlink()
        except FileNotFoundError:
            return False
        except OSError as exc:
            raise StorageError(f"failed to delete chunk {chunk_id!r}: {exc}") from exc
        return True

    def stats(self) -> StoreStats:
        per_chunk = {}
        try:
            for path in sorted(self.root.glob(f"*{FILE_SUFFIX}")):
                per_chunk[path.name[: -len(FILE_SUFFIX)]] = path.stat().st_size
        except OSError as exc:
            raise StorageError(f"failed to stat store {self.root}: {exc}") from exc
        return StoreStats(
            files=len(per_chunk), bytes=sum(per_chunk.values()), per_chunk_bytes=per_chunk
        )
