"""Sharded half-precision key-value store for teacher embeddings.

Shard layout (little-endian, documented bit-exactly in docs/formats.md):

    magic   8 bytes  b"TAPEMB01"
    u32     embedding dimension D
    records, back to back:
        u32  key length
        key  UTF-8 bytes
        u32  CRC32 over key bytes + vector bytes
        vec  D float16 values
    index over records, sorted by key:
        u32  key length, key bytes, u64 record offset
    footer:
        u64  index offset, u32 record count, 8 bytes b"TAPEMBIX"

Writers own a shard exclusively until it is sealed; sealed shards are
immutable and safe for concurrent readers.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"TAPEMB01"
FOOTER_MAGIC = b"TAPEMBIX"
DEFAULT_SHARD_SIZE = 4096


class EmbeddingNotFound(KeyError):
    """Requested region id has no stored embedding."""


class StoreCorruption(RuntimeError):
    """A record or shard failed its integrity check."""


class EmbeddingStoreWriter:
    def __init__(self, out_dir: str | Path, d_text: int, shard_size: int = DEFAULT_SHARD_SIZE):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.d_text = d_text
        self.shard_size = shard_size
        self._seen: set[str] = set()
        self._shard_no = 0
        self._entries: list[tuple[str, int]] = []
        self._file = None

    def _open_shard(self):
        path = self.out_dir / f"embeddings-{self._shard_no:05d}.tap"
        self._file = open(path, "wb")
        self._file.write(MAGIC)
        self._file.write(struct.pack("<I", self.d_text))
        self._entries = []

    def put(self, region_id: str, vector: np.ndarray) -> None:
        if region_id in self._seen:
            raise ValueError(f"duplicate region id {region_id!r}")
        vector = np.ascontiguousarray(vector, dtype=np.float16)
        if vector.shape != (self.d_text,):
            raise ValueError(f"expected shape ({self.d_text},), got {vector.shape}")
        if self._file is None:
            self._open_shard()
        key = region_id.encode()
        payload = vector.tobytes()
        offset = self._file.tell()
        self._file.write(struct.pack("<I", len(key)))
        self._file.write(key)
        self._file.write(struct.pack("<I", zlib.crc32(key + payload)))
        self._file.write(payload)
        self._entries.append((region_id, offset))
        self._seen.add(region_id)
        if len(self._entries) >= self.shard_size:
            self._seal()

    def _seal(self):
        index_offset = self._file.tell()
        for region_id, offset in sorted(self._entries):
            key = region_id.encode()
            self._file.write(struct.pack("<I", len(key)))
            self._file.write(key)
            self._file.write(struct.pack("<Q", offset))
        self._file.write(struct.pack("<QI", index_offset, len(self._entries)))
        self._file.write(FOOTER_MAGIC)
        self._file.close()
        self._file = None
        self._shard_no += 1

    def close(self):
        if self._file is not None:
            self._seal()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_shard_index(path: str | Path) -> list[tuple[str, int]]:
    """Return the sealed shard's (key, offset) index in stored order."""
    with open(path, "rb") as f:
        data_head = f.read(12)
        if data_head[:8] != MAGIC:
            raise StoreCorruption(f"{path}: bad shard magic")
        f.seek(-20, 2)
        index_offset, count = struct.unpack("<QI", f.read(12))
        if f.read(8) != FOOTER_MAGIC:
            raise StoreCorruption(f"{path}: bad footer magic")
        f.seek(index_offset)
        entries = []
        for _ in range(count):
            (klen,) = struct.unpack("<I", f.read(4))
            key = f.read(klen).decode()
            (offset,) = struct.unpack("<Q", f.read(8))
            entries.append((key, offset))
    return entries


class EmbeddingStore:
    """Read-only view over all sealed shards in a directory."""

    def __init__(self, store_dir: str | Path):
        self.store_dir = Path(store_dir)
        self.shards = sorted(self.store_dir.glob("embeddings-*.tap"))
        if not self.shards:
            raise FileNotFoundError(f"no embedding shards under {store_dir}")
        with open(self.shards[0], "rb") as f:
            f.seek(8)
            (self.d_text,) = struct.unpack("<I", f.read(4))
        self._index: dict[str, tuple[Path, int]] = {}
        for shard in self.shards:
            for key, offset in read_shard_index(shard):
                self._index[key] = (shard, offset)

    def __len__(self) -> int:
        return len(self._index)

    def keys(self):
        return self._index.keys()

    def __contains__(self, region_id: str) -> bool:
        return region_id in self._index

    def read(self, region_id: str) -> np.ndarray:
        try:
            shard, offset = self._index[region_id]
        except KeyError:
            raise EmbeddingNotFound(region_id) from None
        with open(shard, "rb") as f:
            f.seek(offset)
            (klen,) = struct.unpack("<I", f.read(4))
            key = f.read(klen)
            (crc,) = struct.unpack("<I", f.read(4))
            payload = f.read(2 * self.d_text)
        if zlib.crc32(key + payload) != crc:
            raise StoreCorruption(f"checksum mismatch for {region_id!r}")
        if key.decode() != region_id:
            raise StoreCorruption(f"index points at wrong record for {region_id!r}")
        return np.frombuffer(payload, dtype=np.float16).copy()

    def load_all(self) -> dict[str, np.ndarray]:
        return {key: self.read(key) for key in self._index}


def precompute_embeddings(dataset, teacher, out_dir: str | Path,
                          shard_size: int = DEFAULT_SHARD_SIZE) -> int:
    """Embed every region via the teacher's masked-crop tower; returns count."""
    written = 0
    with EmbeddingStoreWriter(out_dir, teacher.d_text, shard_size) as writer:
        for rec, region in dataset.iter_regions():
            vec = teacher.encode_masked_crop(rec.image, region.mask)
            writer.put(region.region_id, vec.astype(np.float16))
            written += 1
    return written
