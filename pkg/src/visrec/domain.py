"""Core value types and exact vector math shared by every other module."""
from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidItem, ZeroVector

logger = logging.getLogger(__name__)

ItemId = int
MAX_ITEM_ID = 2**64 - 1

NORM_TOLERANCE = 1e-4
_ZERO_NORM = 1e-12


def parse_item_id(value) -> ItemId:
    """Accept an int or its decimal string form (used on external interfaces)."""
    if isinstance(value, bool):
        raise InvalidItem(f"invalid item id {value!r}")
    if isinstance(value, str):
        value = value.strip()
        if not value.isdigit():
            raise InvalidItem(f"invalid item id {value!r}")
        value = int(value)
    if not isinstance(value, (int, np.integer)):
        raise InvalidItem(f"invalid item id {value!r}")
    value = int(value)
    if not 0 <= value <= MAX_ITEM_ID:
        raise InvalidItem(f"item id {value} outside u64 range")
    return value


@dataclass(frozen=True)
class CategoryPath:
    """Category labels ordered root first; the last label is the leaf."""

    levels: tuple[str, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise InvalidItem("category path must have at least one level")
        if any(not isinstance(label, str) or not label for label in levels):
            raise InvalidItem(f"category labels must be non-empty strings: {levels!r}")
        object.__setattr__(self, "levels", levels)

    @property
    def leaf(self) -> str:
        return self.levels[-1]

    @property
    def parent(self) -> tuple[str, ...]:
        """Path up to (excluding) the leaf; empty for a single-level path."""
        return self.levels[:-1]

    @property
    def depth(self) -> int:
        return len(self.levels)

    def __str__(self) -> str:
        return "/".join(self.levels)


def parse_timestamp(value) -> datetime:
    if isinstance(value, datetime):
        ts = value
    elif isinstance(value, str):
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            ts = datetime.fromisoformat(text)
        except ValueError as exc:
            raise InvalidItem(f"created_at is not RFC 3339: {value!r}") from exc
    else:
        raise InvalidItem(f"created_at is not RFC 3339: {value!r}")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class Item:
    id: ItemId
    title: str
    price: int
    category: CategoryPath
    image_ref: str
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def __post_init__(self):
        if isinstance(self.price, bool) or not isinstance(self.price, int):
            raise InvalidItem(f"price must be an integer, got {self.price!r}")
        if self.price <= 0:
            raise InvalidItem(f"price must be positive, got {self.price}")
        if not isinstance(self.category, CategoryPath):
            object.__setattr__(self, "category", CategoryPath(tuple(self.category)))
        object.__setattr__(self, "id", parse_item_id(self.id))

    @classmethod
    def from_dict(cls, data: dict) -> "Item":
        if not isinstance(data, dict):
            raise InvalidItem("item record must be a JSON object")
        missing = [k for k in ("id", "price", "category") if k not in data]
        if missing:
            raise InvalidItem(f"missing fields: {', '.join(missing)}")
        category = data["category"]
        if not isinstance(category, list):
            raise InvalidItem("category must be an array of strings")
        price = data["price"]
        if isinstance(price, float) and price.is_integer():
            price = int(price)
        created = data.get("created_at")
        return cls(
            id=parse_item_id(data["id"]),
            title=str(data.get("title", "")),
            price=price,
            category=CategoryPath(tuple(category)),
            image_ref=str(data.get("image_ref", "")),
            created_at=parse_timestamp(created) if created is not None else datetime.now(timezone.utc),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "price": self.price,
            "category": list(self.category.levels),
            "image_ref": self.image_ref,
            "created_at": format_timestamp(self.created_at),
        }


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-dimension float32 vector.

    ``values`` is stored as a read-only array so instances can be shared
    between threads. Equality is elementwise.
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float32, copy=True).reshape(-1)
        if arr.size == 0:
            raise DimensionMismatch("embedding must have dim >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains NaN or Inf")
        if self.normalized:
            norm = _norm64(arr)
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise ValueError(f"embedding flagged normalized but has norm {norm:.6f}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __len__(self) -> int:
        return self.dim

    def __eq__(self, other) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.normalized == other.normalized and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.values.tobytes(), self.normalized))

    def to_bytes(self) -> bytes:
        """Little-endian f32 payload, the per-item storage cost."""
        return self.values.astype("<f4").tobytes()

    def tolist(self) -> list[float]:
        return [float(v) for v in self.values]


def _norm64(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=np.float64)
    return math.sqrt(float(np.dot(v, v)))


def as_array(e) -> np.ndarray:
    """Return the float32 values of an Embedding or array-like."""
    if isinstance(e, Embedding):
        return e.values
    return np.asarray(e, dtype=np.float32).reshape(-1)


def normalize(e: Embedding | Sequence[float] | np.ndarray) -> Embedding:
    values = np.asarray(as_array(e), dtype=np.float64)
    if values.size == 0:
        raise DimensionMismatch("embedding must have dim >= 1")
    if not np.all(np.isfinite(values)):
        raise ValueError("embedding contains NaN or Inf")
    norm = math.sqrt(float(np.dot(values, values)))
    if norm < _ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    return Embedding(values / norm, normalized=True)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization of a 2-D array, returned as float32."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(norms < _ZERO_NORM):
        raise ZeroVector(f"row {int(np.argmin(norms))} is a zero vector")
    return (m / norms[:, None]).astype(np.float32)


def cosine_similarity(a, b) -> float:
    va = np.asarray(as_array(a), dtype=np.float64)
    vb = np.asarray(as_array(b), dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionMismatch(f"dimension {va.shape[0]} != {vb.shape[0]}")
    na = math.sqrt(float(np.dot(va, va)))
    nb = math.sqrt(float(np.dot(vb, vb)))
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise ZeroVector("cosine similarity undefined for a zero vector")
    sim = float(np.dot(va, vb)) / (na * nb)
    return max(-1.0, min(1.0, sim))


# --- catalog -----------------------------------------------------------------


def iter_catalog_jsonl(path: str | Path) -> Iterator[tuple[int, Item | None, str | None]]:
    """Yield ``(line_no, item, error)`` for each non-blank line.

    Exactly one of ``item`` and ``error`` is set. Unknown fields are ignored.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                item = Item.from_dict(json.loads(line))
            except (json.JSONDecodeError, InvalidItem, TypeError, ValueError) as exc:
                yield line_no, None, str(exc)
            else:
                yield line_no, item, None


def read_catalog(path: str | Path) -> list[Item]:
    items = []
    for line_no, item, err in iter_catalog_jsonl(path):
        if err is not None:
            logger.warning("catalog %s line %d skipped: %s", path, line_no, err)
            continue
        items.append(item)
    return items


def write_catalog(path: str | Path, items: Iterable[Item]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")


class CatalogStore:
    """Thread-safe in-memory item store keyed by id."""

    def __init__(self, items: Iterable[Item] = ()):
        self._items: dict[ItemId, Item] = {}
        self._lock = threading.Lock()
        for item in items:
            self._items[item.id] = item

    @classmethod
    def load(cls, path: str | Path) -> "CatalogStore":
        return cls(read_catalog(path))

    def save(self, path: str | Path) -> None:
        with self._lock:
            items = [self._items[k] for k in sorted(self._items)]
        write_catalog(path, items)

    def upsert(self, item: Item) -> None:
        with self._lock:
            self._items[item.id] = item

    def delete(self, item_id: ItemId) -> bool:
        with self._lock:
            return self._items.pop(item_id, None) is not None

    def get(self, item_id: ItemId) -> Item | None:
        return self._items.get(item_id)

    def __getitem__(self, item_id: ItemId) -> Item:
        return self._items[item_id]

    def __contains__(self, item_id) -> bool:
        return item_id in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Item]:
        with self._lock:
            items = list(self._items.values())
        return iter(items)

    def ids(self) -> list[ItemId]:
        with self._lock:
            return sorted(self._items)


# --- embedding files -----------------------------------------------------------


def save_embeddings(path: str | Path, ids: Sequence[int], vectors: np.ndarray) -> None:
    """Write ``.npz`` (arrays ``ids``, ``vectors``) or ``.jsonl`` by extension."""
    ids_arr = np.asarray([parse_item_id(i) for i in ids], dtype=np.uint64)
    vecs = np.asarray(vectors, dtype=np.float32)
    if vecs.ndim != 2 or vecs.shape[0] != ids_arr.shape[0]:
        raise DimensionMismatch("ids and vectors must align")
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for i, v in zip(ids_arr.tolist(), vecs):
                fh.write(json.dumps({"id": i, "embedding": [float(x) for x in v]}) + "\n")
    else:
        with open(path, "wb") as fh:
            np.savez(fh, ids=ids_arr, vectors=vecs)


def load_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an embeddings file written by :func:`save_embeddings`."""
    path = Path(path)
    if path.suffix == ".jsonl":
        ids, rows = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    ids.append(parse_item_id(rec["id"]))
                    rows.append(np.asarray(rec["embedding"], dtype=np.float32))
                except (KeyError, TypeError, ValueError, InvalidItem) as exc:
                    raise ValueError(f"{path} line {line_no}: {exc}") from exc
        if len({r.shape for r in rows}) > 1:
            raise DimensionMismatch(f"{path}: rows have differing dimensions")
        vecs = np.stack(rows) if rows else np.zeros((0, 0), dtype=np.float32)
        return np.asarray(ids, dtype=np.uint64), vecs
    with np.load(path) as data:
        return data["ids"].astype(np.uint64), data["vectors"].astype(np.float32)
