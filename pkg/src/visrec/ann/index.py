"""HNSW index over unit-norm embeddings keyed by ItemId."""
from __future__ import annotations

import logging
import math
import os
import random
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .._rwlock import RWLock
from ..domain import NORM_TOLERANCE, ItemId, as_array, parse_item_id
from ..errors import DimensionMismatch, EmptyIndex, NotNormalized, SnapshotError
from . import kernels

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"VRIX"
SNAPSHOT_VERSION = 1
COMPACT_THRESHOLD = 0.2
MAX_LEVEL = 255


@dataclass(frozen=True)
class AnnParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.ef_construction < self.M:
            raise ValueError("ef_construction must be >= M")
        if self.ef_search < 1:
            raise ValueError("ef_search must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in u64")


@dataclass(frozen=True)
class Neighbor:
    id: ItemId
    score: float


class HnswIndex:
    """Hierarchical navigable small-world graph with cosine scoring.

    Vectors must be unit norm, so cosine similarity is the inner product.
    Deletions are tombstones; the graph is rebuilt from the live nodes once
    tombstones exceed ``COMPACT_THRESHOLD`` of all stored nodes. Re-inserting
    an existing id tombstones the old node and links a fresh one.

    Searches take a shared lock and may run concurrently; insert, remove and
    compaction take the exclusive lock.
    """

    def __init__(self, dim: int, params: AnnParams | None = None, backend: str | None = None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self.params = params or AnnParams()
        self._kern = kernels.load_backend(backend) if backend else kernels.backend
        self._lock = RWLock()
        self._local = threading.local()
        self._level_mult = 1.0 / math.log(self.params.M)
        self._reset_storage(64)

    # -- storage ---------------------------------------------------------------

    def _reset_storage(self, capacity: int) -> None:
        self._cap = capacity
        self._n = 0
        self._vectors = np.zeros((capacity, self.dim), dtype=np.float32)
        self._ids = np.zeros(capacity, dtype=np.uint64)
        self._deleted = np.zeros(capacity, dtype=np.uint8)
        self._levels = np.zeros(capacity, dtype=np.uint8)
        self._links: list[np.ndarray] = []
        self._counts: list[np.ndarray] = []
        self._slot_of: dict[ItemId, int] = {}
        self._n_deleted = 0
        self._entry = -1
        self._top = -1
        self._ensure_layers(0)

    def _max_degree(self, layer: int) -> int:
        return 2 * self.params.M if layer == 0 else self.params.M

    def _ensure_layers(self, level: int) -> None:
        while len(self._links) <= level:
            layer = len(self._links)
            self._links.append(np.zeros((self._cap, self._max_degree(layer)), dtype=np.int32))
            self._counts.append(np.zeros(self._cap, dtype=np.int32))

    def _grow(self) -> None:
        new_cap = self._cap * 2

        def grown(arr):
            out = np.zeros((new_cap,) + arr.shape[1:], dtype=arr.dtype)
            out[: self._cap] = arr
            return out

        self._vectors = grown(self._vectors)
        self._ids = grown(self._ids)
        self._deleted = grown(self._deleted)
        self._levels = grown(self._levels)
        self._links = [grown(a) for a in self._links]
        self._counts = [grown(a) for a in self._counts]
        self._cap = new_cap

    def _scratch(self):
        """Per-thread visited-tag buffer for the compiled kernel."""
        local = self._local
        buf = getattr(local, "visited", None)
        if buf is None or buf.shape[0] < self._cap:
            buf = np.zeros(self._cap, dtype=np.uint32)
            local.visited = buf
            local.epoch = 0
        local.epoch += 1
        if local.epoch >= 2**32 - 1:
            buf.fill(0)
            local.epoch = 1
        return buf, local.epoch

    # -- introspection ---------------------------------------------------------

    @property
    def backend(self) -> str:
        return self._kern.BACKEND

    def __len__(self) -> int:
        return len(self._slot_of)

    @property
    def size(self) -> int:
        return len(self._slot_of)

    @property
    def stored_nodes(self) -> int:
        """Nodes in the graph, tombstones included."""
        return self._n

    @property
    def tombstones(self) -> int:
        return self._n_deleted

    def __contains__(self, item_id) -> bool:
        return item_id in self._slot_of

    @property
    def entry_point(self) -> tuple[ItemId, int] | None:
        if self._entry < 0:
            return None
        return int(self._ids[self._entry]), int(self._top)

    def ids(self) -> list[ItemId]:
        return sorted(self._slot_of)

    def get_vector(self, item_id: ItemId) -> np.ndarray:
        with self._lock.read():
            slot = self._slot_of.get(item_id)
            if slot is None:
                raise KeyError(item_id)
            return self._vectors[slot].copy()

    def level_of(self, item_id: ItemId) -> int:
        return int(self._levels[self._slot_of[item_id]])

    def neighbors(self, item_id: ItemId, layer: int = 0) -> list[ItemId]:
        """Adjacency of the live node for ``item_id`` on ``layer``, as ItemIds."""
        with self._lock.read():
            slot = self._slot_of[item_id]
            if layer >= len(self._links) or layer > self._levels[slot]:
                return []
            row = self._links[layer][slot, : self._counts[layer][slot]]
            return [int(self._ids[s]) for s in row]

    def unreachable_on_layer0(self) -> list[ItemId]:
        """Live ids not reachable from the entry point along layer-0 edges."""
        with self._lock.read():
            if self._entry < 0:
                return []
            seen = np.zeros(self._n, dtype=bool)
            seen[self._entry] = True
            stack = [self._entry]
            links, counts = self._links[0], self._counts[0]
            while stack:
                s = stack.pop()
                for t in links[s, : counts[s]].tolist():
                    if not seen[t]:
                        seen[t] = True
                        stack.append(t)
            return sorted(i for i, slot in self._slot_of.items() if not seen[slot])

    def has_tombstoned_links(self) -> bool:
        with self._lock.read():
            for layer, (links, counts) in enumerate(zip(self._links, self._counts)):
                for s in range(self._n):
                    if self._deleted[s] or self._levels[s] < layer:
                        continue
                    row = links[s, : counts[s]]
                    if row.size and self._deleted[row].any():
                        return True
            return False

    # -- writes ----------------------------------------------------------------

    def _check_vector(self, e) -> np.ndarray:
        v = np.ascontiguousarray(as_array(e), dtype=np.float32)
        if v.shape[0] != self.dim:
            raise DimensionMismatch(f"expected dim {self.dim}, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector contains NaN or Inf")
        norm = math.sqrt(float(np.dot(v.astype(np.float64), v.astype(np.float64))))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise NotNormalized(f"vector norm {norm:.6f} is not 1")
        return v

    def sample_level(self, item_id: ItemId) -> int:
        rng = random.Random(f"{self.params.seed}:{item_id}")
        u = 1.0 - rng.random()
        return min(int(-math.log(u) * self._level_mult), MAX_LEVEL)

    def insert(self, item_id: ItemId, e) -> None:
        item_id = parse_item_id(item_id)
        v = self._check_vector(e)
        with self._lock.write():
            old = self._slot_of.get(item_id)
            if old is not None:
                self._deleted[old] = 1
                self._n_deleted += 1
            self._link_new(item_id, v, self.sample_level(item_id))
            self._maybe_compact()

    def _link_new(self, item_id: ItemId, v: np.ndarray, level: int) -> None:
        kern = self._kern
        if self._n == self._cap:
            self._grow()
        self._ensure_layers(level)
        slot = self._n
        self._n += 1
        self._vectors[slot] = v
        self._ids[slot] = item_id
        self._levels[slot] = level
        self._deleted[slot] = 0
        self._slot_of[item_id] = slot

        if self._entry < 0:
            self._entry, self._top = slot, level
            return

        vecs, ids, dele = self._vectors, self._ids, self._deleted
        cur = np.array([self._entry], dtype=np.int64)
        for layer in range(self._top, level, -1):
            visited, epoch = self._scratch()
            found, _ = kern.search_layer(v, cur, 1, vecs, ids, dele, self._links[layer],
                                         self._counts[layer], visited, epoch, False)
            cur = found[:1]
        for layer in range(min(level, self._top), -1, -1):
            visited, epoch = self._scratch()
            found, scores = kern.search_layer(v, cur, self.params.ef_construction, vecs, ids, dele,
                                              self._links[layer], self._counts[layer],
                                              visited, epoch, True)
            if found.size == 0:
                visited, epoch = self._scratch()
                found, scores = kern.search_layer(v, cur, self.params.ef_construction, vecs, ids,
                                                  dele, self._links[layer], self._counts[layer],
                                                  visited, epoch, False)
            chosen = kern.select_neighbors(found, scores, self._max_degree(layer), vecs)
            kern.connect(slot, np.ascontiguousarray(chosen, dtype=np.int64),
                         self._links[layer], self._counts[layer], vecs, ids)
            cur = found
        if level > self._top:
            self._entry, self._top = slot, level

    def add_items(self, item_ids, vectors) -> None:
        for item_id, v in zip(item_ids, vectors):
            self.insert(item_id, v)

    def remove(self, item_id) -> bool:
        with self._lock.write():
            slot = self._slot_of.pop(item_id, None)
            if slot is None:
                return False
            self._deleted[slot] = 1
            self._n_deleted += 1
            self._maybe_compact()
            return True

    def _maybe_compact(self) -> None:
        if self._n_deleted > COMPACT_THRESHOLD * self._n:
            self._compact_locked()

    def compact(self) -> None:
        """Drop tombstones by relinking the live nodes in their original order."""
        with self._lock.write():
            self._compact_locked()

    def _compact_locked(self) -> None:
        if self._n_deleted == 0:
            return
        live = [s for s in range(self._n) if not self._deleted[s]]
        logger.debug("compacting index: %d live, %d tombstones", len(live), self._n_deleted)
        vecs = self._vectors[live].copy()
        ids = self._ids[live].copy()
        levels = self._levels[live].copy()
        cap = 64
        while cap < len(live):
            cap *= 2
        self._reset_storage(cap)
        for v, item_id, level in zip(vecs, ids.tolist(), levels.tolist()):
            self._link_new(int(item_id), v, int(level))

    # -- reads -----------------------------------------------------------------

    def search(self, q, k: int, ef: int | None = None) -> list[Neighbor]:
        if k < 1:
            raise ValueError("k must be >= 1")
        v = self._check_vector(q)
        with self._lock.read():
            if not self._slot_of:
                raise EmptyIndex("search on an empty index")
            kern = self._kern
            vecs, ids, dele = self._vectors, self._ids, self._deleted
            ef = max(ef if ef is not None else self.params.ef_search, k)
            cur = np.array([self._entry], dtype=np.int64)
            for layer in range(self._top, 0, -1):
                visited, epoch = self._scratch()
                found, _ = kern.search_layer(v, cur, 1, vecs, ids, dele, self._links[layer],
                                             self._counts[layer], visited, epoch, False)
                cur = found[:1]
            visited, epoch = self._scratch()
            found, scores = kern.search_layer(v, cur, ef, vecs, ids, dele, self._links[0],
                                              self._counts[0], visited, epoch, True)
            return [
                Neighbor(int(ids[s]), max(-1.0, min(1.0, float(sc))))
                for s, sc in zip(found[:k].tolist(), scores[:k].tolist())
            ]

    def exact_search(self, q, k: int) -> list[Neighbor]:
        """Full scan over live nodes; the oracle for recall measurements."""
        v = self._check_vector(q).astype(np.float64)
        with self._lock.read():
            slots = np.fromiter(self._slot_of.values(), dtype=np.int64)
            if slots.size == 0:
                raise EmptyIndex("search on an empty index")
            scores = self._vectors[slots].astype(np.float64) @ v
            keys = self._ids[slots]
            order = np.lexsort((keys, -scores))[:k]
            return [Neighbor(int(keys[i]), max(-1.0, min(1.0, float(scores[i])))) for i in order]

    # -- snapshots -------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write a VRIX snapshot. Pending tombstones are compacted first."""
        with self._lock.write():
            self._compact_locked()
            payload = self._serialize()
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _serialize(self) -> bytes:
        p = self.params
        parts = [
            SNAPSHOT_MAGIC,
            struct.pack("<IIIIQQ", SNAPSHOT_VERSION, self.dim, p.M, p.ef_construction, p.seed, self._n),
        ]
        for s in range(self._n):
            level = int(self._levels[s])
            parts.append(struct.pack("<QB", int(self._ids[s]), level))
            parts.append(self._vectors[s].astype("<f4").tobytes())
            for layer in range(level + 1):
                row = self._links[layer][s, : self._counts[layer][s]]
                parts.append(struct.pack("<H", row.shape[0]))
                parts.append(self._ids[row].astype("<u8").tobytes())
        if self._entry >= 0:
            parts.append(struct.pack("<QB", int(self._ids[self._entry]), self._top))
        else:
            parts.append(struct.pack("<QB", 0, 0))
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def load(cls, path: str | Path, ef_search: int | None = None, backend: str | None = None) -> "HnswIndex":
        data = Path(path).read_bytes()
        if len(data) < 4 + 40 + 9 + 4 or data[:4] != SNAPSHOT_MAGIC:
            raise SnapshotError(f"{path}: not an index snapshot")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise SnapshotError(f"{path}: CRC mismatch")
        version, dim, m, efc, seed, n = struct.unpack_from("<IIIIQQ", body, 4)
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"{path}: unsupported version {version}")
        params = AnnParams(M=m, ef_construction=efc, seed=seed,
                           ef_search=ef_search if ef_search is not None else AnnParams.ef_search)
        idx = cls(dim, params, backend=backend)
        cap = 64
        while cap < n:
            cap *= 2
        idx._reset_storage(cap)
        off = 4 + 32
        raw_links: list[list[np.ndarray]] = []
        try:
            for s in range(n):
                item_id, level = struct.unpack_from("<QB", body, off)
                off += 9
                idx._vectors[s] = np.frombuffer(body, dtype="<f4", count=dim, offset=off)
                off += 4 * dim
                idx._ids[s] = item_id
                idx._levels[s] = level
                idx._slot_of[item_id] = s
                idx._ensure_layers(level)
                rows = []
                for _ in range(level + 1):
                    (cnt,) = struct.unpack_from("<H", body, off)
                    off += 2
                    rows.append(np.frombuffer(body, dtype="<u8", count=cnt, offset=off))
                    off += 8 * cnt
                raw_links.append(rows)
            entry_id, top = struct.unpack_from("<QB", body, off)
            off += 9
        except struct.error as exc:
            raise SnapshotError(f"{path}: truncated snapshot") from exc
        if off != len(body):
            raise SnapshotError(f"{path}: trailing bytes after snapshot body")
        idx._n = n
        slot_of = idx._slot_of
        for s, rows in enumerate(raw_links):
            for layer, row in enumerate(rows):
                try:
                    slots = [slot_of[int(t)] for t in row]
                except KeyError as exc:
                    raise SnapshotError(f"{path}: dangling link to {exc.args[0]}") from exc
                if len(slots) > idx._links[layer].shape[1]:
                    raise SnapshotError(f"{path}: adjacency list over degree cap")
                idx._links[layer][s, : len(slots)] = slots
                idx._counts[layer][s] = len(slots)
        if n:
            if entry_id not in slot_of:
                raise SnapshotError(f"{path}: entry point {entry_id} missing")
            idx._entry = slot_of[entry_id]
            idx._top = top
        return idx
