"""Asynchronous embedding worker: listing events -> encoder -> PCA -> index.

Events for one ItemId always hash to the same lane, so they are applied in
submission order; an event older than the last one applied to its item is
skipped as stale. Delivery is at-least-once: duplicate event ids are skipped,
and upserts make replays converge to the same index.
"""
from __future__ import annotations

import enum
import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .ann import HnswIndex
from .domain import (
    CatalogStore,
    Item,
    ItemId,
    parse_timestamp,
    format_timestamp,
    iter_catalog_jsonl,
    normalize,
    parse_item_id,
)
from .errors import (
    EncoderError,
    FileUnreadable,
    IndexClosed,
    InvalidItem,
    PcaDimensionMismatch,
    PcaNotLoaded,
    QueueFull,
    ZeroVector,
)
from .pca import PcaModel
from . import pca as pca_mod

logger = logging.getLogger(__name__)

EVENT_KINDS = ("listed", "updated", "delisted")


class IngestOutcome(str, enum.Enum):
    INDEXED = "indexed"
    REMOVED = "removed"
    SKIPPED = "skipped"
    FAILED = "failed"


@dataclass(frozen=True)
class ListingEvent:
    kind: str
    event_id: int
    item: Item | None = None
    item_id: ItemId | None = None
    occurred_at: datetime | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise InvalidItem(f"unknown event kind {self.kind!r}")
        if self.kind == "delisted":
            if self.item_id is None:
                raise InvalidItem("delisted event requires item_id")
        elif self.item is None:
            raise InvalidItem(f"{self.kind} event requires an item")
        if self.item is not None and self.item_id is None:
            object.__setattr__(self, "item_id", self.item.id)
        if self.occurred_at is None:
            object.__setattr__(self, "occurred_at", datetime.now(timezone.utc))

    @classmethod
    def from_dict(cls, data: dict) -> "ListingEvent":
        if not isinstance(data, dict):
            raise InvalidItem("event must be a JSON object")
        try:
            kind = data["kind"]
            event_id = int(data["event_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidItem(f"event lacks kind/event_id: {exc}") from exc
        item = Item.from_dict(data["item"]) if data.get("item") is not None else None
        item_id = parse_item_id(data["item_id"]) if data.get("item_id") is not None else None
        occurred = data.get("occurred_at")
        return cls(kind, event_id, item, item_id, parse_timestamp(occurred) if occurred else None)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "event_id": self.event_id, "item_id": self.item_id,
               "occurred_at": format_timestamp(self.occurred_at)}
        if self.item is not None:
            out["item"] = self.item.to_dict()
        return out


def iter_events(path: str | Path) -> Iterator[tuple[int, ListingEvent | None, str | None]]:
    """Yield ``(line_no, event, error)`` from an NDJSON file or named pipe."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"{path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, ListingEvent.from_dict(json.loads(line)), None
            except (json.JSONDecodeError, InvalidItem, ValueError) as exc:
                yield line_no, None, str(exc)


@dataclass
class IngestStats:
    processed: int = 0
    failed: int = 0
    retried: int = 0
    skipped: int = 0
    index_size: int = 0
    last_event_id: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class IngestWorker:
    """Applies listing events to the index and catalog.

    ``handle_event`` is synchronous. ``start``/``submit``/``drain`` run the
    same handler on ``lanes`` background threads.
    """

    def __init__(
        self,
        index: HnswIndex,
        catalog: CatalogStore,
        pca: PcaModel | None,
        encoder,
        lanes: int = 4,
        dead_letter_path: str | Path | None = None,
        retry_attempts: int = 3,
        backoff_ms: float = 200.0,
        queue_capacity: int = 10_000,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.index = index
        self.catalog = catalog
        self.pca = pca
        self.encoder = encoder
        self.lanes = lanes
        self.dead_letter_path = Path(dead_letter_path) if dead_letter_path else None
        self.retry_attempts = retry_attempts
        self.backoff_ms = backoff_ms
        self._sleep = sleep
        self._closed = False
        self._state_lock = threading.Lock()
        self._dead_letter_lock = threading.Lock()
        self._seen_events: set[int] = set()
        self._last_applied: dict[ItemId, int] = {}
        self._stats = IngestStats()
        self._queues = [queue.Queue(maxsize=queue_capacity) for _ in range(lanes)]
        self._threads: list[threading.Thread] = []
        if pca is not None:
            self._check_dims(pca)

    # -- configuration -----------------------------------------------------------

    def _check_dims(self, model: PcaModel) -> None:
        if model.output_dim != self.index.dim:
            raise PcaDimensionMismatch(f"PCA outputs {model.output_dim}-d vectors, index is {self.index.dim}-d")
        enc_dim = getattr(getattr(self.encoder, "cfg", None), "output_dim", None)
        if enc_dim is not None and enc_dim != model.input_dim:
            raise PcaDimensionMismatch(f"encoder emits {enc_dim}-d vectors, PCA expects {model.input_dim}-d")

    def set_pca(self, model: PcaModel) -> None:
        self._check_dims(model)
        self.pca = model

    def close(self) -> None:
        self.stop()
        self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed

    def stats(self) -> IngestStats:
        with self._state_lock:
            s = IngestStats(**asdict(self._stats))
        s.index_size = len(self.index)
        return s

    # -- event handling ----------------------------------------------------------

    def lane_of(self, item_id: ItemId) -> int:
        mixed = (item_id * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        return (mixed >> 32) % self.lanes

    def handle_event(self, ev: ListingEvent) -> IngestOutcome:
        if self._closed:
            raise IndexClosed("ingest worker is closed")
        if self.pca is None:
            raise PcaNotLoaded("PCA model must be loaded before ingesting")
        with self._state_lock:
            if ev.event_id in self._seen_events:
                self._stats.skipped += 1
                return IngestOutcome.SKIPPED
            last = self._last_applied.get(ev.item_id)
            if last is not None and ev.event_id < last:
                logger.info("skipping stale event %d for item %d (last applied %d)", ev.event_id, ev.item_id, last)
                self._seen_events.add(ev.event_id)
                self._stats.skipped += 1
                return IngestOutcome.SKIPPED

        if ev.kind == "delisted":
            self.index.remove(ev.item_id)
            self.catalog.delete(ev.item_id)
            outcome = IngestOutcome.REMOVED
        else:
            try:
                vector = self.embed(ev.item)
            except (EncoderError, ZeroVector) as exc:
                self._dead_letter(ev, exc)
                with self._state_lock:
                    self._stats.failed += 1
                return IngestOutcome.FAILED
            self.catalog.upsert(ev.item)
            self.index.insert(ev.item.id, vector)
            outcome = IngestOutcome.INDEXED

        with self._state_lock:
            self._seen_events.add(ev.event_id)
            self._last_applied[ev.item_id] = max(ev.event_id, self._last_applied.get(ev.item_id, ev.event_id))
            self._stats.processed += 1
            self._stats.last_event_id = max(self._stats.last_event_id, ev.event_id)
        return outcome

    def encode_with_retry(self, item: Item):
        delay = self.backoff_ms / 1000.0
        for attempt in range(1, self.retry_attempts + 1):
            try:
                return self.encoder.encode(item)
            except EncoderError as exc:
                if attempt == self.retry_attempts:
                    raise
                logger.warning("encoder failed for item %d (attempt %d): %s", item.id, attempt, exc)
                with self._state_lock:
                    self._stats.retried += 1
                self._sleep(delay)
                delay *= 2

    def project(self, raw) -> np.ndarray:
        if self.pca is None:
            raise PcaNotLoaded("PCA model must be loaded before ingesting")
        if raw.dim != self.pca.input_dim:
            raise PcaDimensionMismatch(f"encoder emitted {raw.dim}-d vector, PCA expects {self.pca.input_dim}-d")
        return normalize(self.pca.transform(raw)).values

    def embed(self, item: Item) -> np.ndarray:
        return self.project(self.encode_with_retry(item))

    def _dead_letter(self, ev: ListingEvent, exc: Exception) -> None:
        logger.error("event %d dead-lettered: %s", ev.event_id, exc)
        if self.dead_letter_path is None:
            return
        record = {"event": ev.to_dict(), "error": f"{type(exc).__name__}: {exc}",
                  "failed_at": format_timestamp(datetime.now(timezone.utc))}
        with self._dead_letter_lock, open(self.dead_letter_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    # -- lanes -------------------------------------------------------------------

    def start(self) -> None:
        if self._threads:
            return
        for lane, q in enumerate(self._queues):
            t = threading.Thread(target=self._run_lane, args=(q,), name=f"ingest-lane-{lane}", daemon=True)
            t.start()
            self._threads.append(t)

    def _run_lane(self, q: queue.Queue) -> None:
        while True:
            ev = q.get()
            try:
                if ev is None:
                    return
                self.handle_event(ev)
            except Exception:  # noqa: BLE001
                logger.exception("ingest lane crashed on event %s", getattr(ev, "event_id", "?"))
            finally:
                q.task_done()

    def submit(self, ev: ListingEvent, block: bool = False, timeout: float | None = None) -> None:
        if self._closed:
            raise IndexClosed("ingest worker is closed")
        try:
            self._queues[self.lane_of(ev.item_id)].put(ev, block=block, timeout=timeout)
        except queue.Full as exc:
            raise QueueFull("ingest queue is at capacity") from exc

    def pending(self) -> int:
        return sum(q.unfinished_tasks for q in self._queues)

    def drain(self) -> None:
        for q in self._queues:
            q.join()

    def stop(self) -> None:
        if not self._threads:
            return
        for q in self._queues:
            q.put(None)
        for t in self._threads:
            t.join()
        self._threads = []

    # -- bulk --------------------------------------------------------------------

    def run_events(self, path: str | Path) -> IngestStats:
        """Feed an event file through the lanes and wait for completion."""
        started = not self._threads
        self.start()
        try:
            for line_no, ev, err in iter_events(path):
                if err is not None:
                    logger.warning("events %s line %d rejected: %s", path, line_no, err)
                    with self._state_lock:
                        self._stats.failed += 1
                    continue
                self.submit(ev, block=True)
            self.drain()
        finally:
            if started:
                self.stop()
        return self.stats()

    def run_backfill(self, catalog_file: str | Path, fit_pca: bool = False, pca_dim: int = 128) -> IngestStats:
        """Index every valid catalog line; malformed lines count as failed.

        With ``fit_pca`` the PCA model is first fitted on the raw embeddings
        of the backfill corpus.
        """
        if self._closed:
            raise IndexClosed("ingest worker is closed")
        if not fit_pca and self.pca is None:
            raise PcaNotLoaded("backfill needs a PCA model or fit_pca=True")
        try:
            rows = list(iter_catalog_jsonl(catalog_file))
        except OSError as exc:
            raise FileUnreadable(f"{catalog_file}: {exc}") from exc

        items: list[Item] = []
        for line_no, item, err in rows:
            if err is not None:
                logger.warning("catalog %s line %d rejected: %s", catalog_file, line_no, err)
                with self._state_lock:
                    self._stats.failed += 1
                continue
            items.append(item)

        raw: dict[int, object] = {}
        for item in items:
            try:
                raw[item.id] = self.encode_with_retry(item)
            except EncoderError as exc:
                self._dead_letter(ListingEvent("listed", 0, item), exc)
                with self._state_lock:
                    self._stats.failed += 1
        if fit_pca:
            corpus = np.stack([raw[i].values for i in sorted(raw)])
            self.set_pca(pca_mod.fit(corpus, pca_dim))

        for item in items:
            if item.id not in raw:
                continue
            try:
                vector = self.project(raw[item.id])
            except ZeroVector as exc:
                self._dead_letter(ListingEvent("listed", 0, item), exc)
                with self._state_lock:
                    self._stats.failed += 1
                continue
            self.catalog.upsert(item)
            self.index.insert(item.id, vector)
            with self._state_lock:
                self._stats.processed += 1
        return self.stats()
