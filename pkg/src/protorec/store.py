"""Persisted embeddings and parameter checkpoints.

Snapshot file layout (little-endian)::

    header  magic "PRSTORE1" | version u32 | dim u32 | n_users u64 | n_entities u64
            | snapshot_id u64 | written_at f64 (unix seconds) | checkpoint sha256 (32 bytes)
    records kind (1 byte, b"U" or b"E") | id u64 | dim x f64

Checkpoints are a directory holding ``manifest.txt`` (``# key=value`` meta
lines, then ``name<TAB>shape<TAB>offset<TAB>count`` per parameter) and
``params.bin`` (the packed little-endian float64 payload).
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PRSTORE1"
VERSION = 1
HEADER = struct.Struct("<8sIIQQQd32s")
# byte range of the wall-clock field inside the header
TIMESTAMP_SLICE = slice(HEADER.size - 40, HEADER.size - 32)


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([("kind", "S1"), ("id", "<u8"), ("vec", "<f8", (dim,))])


@dataclass
class EmbeddingStore:
    user_ids: np.ndarray          # (U,)
    user_vectors: np.ndarray      # (U, d)
    entity_vectors: np.ndarray    # (E, d); row = entity id
    snapshot_id: int = 0
    written_at: float = 0.0
    checkpoint_hash: bytes = b"\0" * 32
    _user_rows: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._user_rows = {int(u): k for k, u in enumerate(self.user_ids)}

    @property
    def dim(self) -> int:
        return self.entity_vectors.shape[1]

    def __len__(self) -> int:
        return len(self.user_ids) + len(self.entity_vectors)

    def has_user(self, user: int) -> bool:
        return user in self._user_rows

    def user(self, user: int) -> np.ndarray:
        try:
            return self.user_vectors[self._user_rows[user]]
        except KeyError:
            raise KeyError(f"user {user} not in snapshot {self.snapshot_id}") from None

    def users(self, users) -> np.ndarray:
        return self.user_vectors[[self._user_rows[int(u)] for u in users]]

    def entity(self, entity: int) -> np.ndarray:
        return self.entity_vectors[entity]

    def to_bytes(self) -> bytes:
        dim = self.dim
        recs = np.zeros(len(self), dtype=record_dtype(dim))
        nu = len(self.user_ids)
        recs["kind"][:nu] = b"U"
        recs["id"][:nu] = self.user_ids
        recs["vec"][:nu] = self.user_vectors
        recs["kind"][nu:] = b"E"
        recs["id"][nu:] = np.arange(len(self.entity_vectors))
        recs["vec"][nu:] = self.entity_vectors
        head = HEADER.pack(MAGIC, VERSION, dim, nu, len(self.entity_vectors), self.snapshot_id,
                           self.written_at, self.checkpoint_hash)
        return head + recs.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingStore":
        magic, version, dim, nu, ne, sid, ts, digest = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError("not an embedding snapshot (bad magic)")
        if version != VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        recs = np.frombuffer(blob, dtype=record_dtype(dim), offset=HEADER.size)
        if len(recs) != nu + ne:
            raise ValueError(f"snapshot holds {len(recs)} records, header says {nu + ne}")
        users, ents = recs[:nu], recs[nu:]
        if not (np.all(users["kind"] == b"U") and np.all(ents["kind"] == b"E")):
            raise ValueError("record kinds out of order")
        entity_vectors = np.zeros((ne, dim))
        entity_vectors[ents["id"].astype(np.int64)] = ents["vec"]
        return cls(users["id"].astype(np.int64), users["vec"].copy(), entity_vectors, sid, ts, digest)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        return cls.from_bytes(Path(path).read_bytes())


def snapshot_path(store_dir: str | Path, snapshot_id: int) -> Path:
    return Path(store_dir) / f"snapshot-{snapshot_id:06d}.bin"


def publish_snapshot(store: EmbeddingStore, store_dir: str | Path, clock=time.time) -> Path:
    """Write ``store`` as the next snapshot id and point LATEST at it."""
    root = Path(store_dir)
    root.mkdir(parents=True, exist_ok=True)
    existing = [int(p.stem.split("-")[1]) for p in root.glob("snapshot-*.bin")]
    store.snapshot_id = max(existing, default=0) + 1
    store.written_at = float(clock())
    path = snapshot_path(root, store.snapshot_id)
    store.save(path)
    latest = root / "LATEST"
    tmp = root / "LATEST.tmp"
    tmp.write_text(f"{store.snapshot_id}\n", encoding="utf-8")
    os.replace(tmp, latest)
    return path


def load_snapshot(store_dir: str | Path, snapshot_id: int | None = None) -> EmbeddingStore:
    root = Path(store_dir)
    if snapshot_id is None:
        latest = root / "LATEST"
        if not latest.exists():
            raise FileNotFoundError(f"no published snapshot in {root}")
        snapshot_id = int(latest.read_text(encoding="utf-8").strip())
    return EmbeddingStore.load(snapshot_path(root, snapshot_id))


# checkpoints ---------------------------------------------------------------

def save_checkpoint(state: Mapping[str, np.ndarray], directory: str | Path,
                    meta: Mapping[str, object] | None = None) -> str:
    """Write a named-parameter checkpoint; returns its sha256 hex digest."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    chunks, offset = [], 0
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        lines.append(f"{name}\t{','.join(map(str, arr.shape))}\t{offset}\t{arr.size}")
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = "\n".join(lines) + "\n"
    payload = b"".join(chunks)
    for fname, data in (("params.bin", payload), ("manifest.txt", manifest.encode("utf-8"))):
        tmp = root / (fname + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, root / fname)
    return checkpoint_hash(root)


def checkpoint_hash(directory: str | Path) -> str:
    root = Path(directory)
    digest = hashlib.sha256()
    digest.update((root / "manifest.txt").read_bytes())
    digest.update((root / "params.bin").read_bytes())
    return digest.hexdigest()


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    root = Path(directory)
    payload = np.frombuffer((root / "params.bin").read_bytes(), dtype="<f8")
    state, meta = {}, {}
    for line in (root / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
            continue
        name, shape, offset, count = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        start = int(offset)
        state[name] = payload[start:start + int(count)].reshape(dims).astype(np.float64)
    return state, meta
