"""HTTP serving layer for the recommendation pipeline.

Routes:

* ``GET  /v1/items/{id}/similar?k=&price_ratio=&ef=``
* ``POST /v1/items``  (enqueue a listing for the ingest worker, 202)
* ``GET  /v1/healthz``, ``GET /v1/stats``
"""
from __future__ import annotations

import asyncio
import json
import logging
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .ann import AnnParams, HnswIndex
from .domain import CatalogStore, Item, format_timestamp, parse_item_id
from .errors import InvalidItem, QueueFull, UnknownItem
from .ingest import IngestStats, IngestWorker, ListingEvent
from .pca import PcaModel
from .reco import EMPTY_AFTER_FILTERING, RecoParams, Recommender

logger = logging.getLogger(__name__)

# published schema for 2xx /similar bodies
SIMILAR_RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["query_item_id", "results", "params_used"],
    "properties": {
        "query_item_id": {"type": "integer", "minimum": 0},
        "results": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["item_id", "score", "tier", "rank"],
                "properties": {
                    "item_id": {"type": "integer", "minimum": 0},
                    "score": {"type": "number", "minimum": -1, "maximum": 1},
                    "tier": {"type": "integer", "enum": [0, 1, 2]},
                    "rank": {"type": "integer", "minimum": 1},
                },
                "additionalProperties": False,
            },
        },
        "params_used": {
            "type": "object",
            "required": ["k", "k_retrieve", "price_ratio", "ef", "include_query_category_tiers"],
        },
        "reason": {"type": "string", "enum": [EMPTY_AFTER_FILTERING]},
    },
    "additionalProperties": False,
}


@dataclass
class ServiceConfig:
    listen_addr: str = "127.0.0.1:8080"
    index_path: str | None = None
    pca_path: str | None = None
    catalog_path: str | None = None
    reco: RecoParams = field(default_factory=RecoParams)
    request_timeout_ms: int = 1000
    max_concurrent_requests: int = 64
    queue_capacity: int = 10_000
    spool_path: str | None = None
    request_log: str | None = None

    def __post_init__(self):
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")
        if self.request_timeout_ms <= 0:
            raise ValueError("request_timeout_ms must be > 0")

    def check_paths(self) -> None:
        for name in ("index_path", "pca_path", "catalog_path"):
            value = getattr(self, name)
            if value and not Path(value).exists():
                raise FileNotFoundError(f"{name} does not exist: {value}")

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_addr.rpartition(":")
        return host or "127.0.0.1", int(port)


class ServiceState:
    """Everything a request handler touches; filled in by the loader."""

    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        self.index: HnswIndex | None = None
        self.catalog: CatalogStore | None = None
        self.pca: PcaModel | None = None
        self.recommender: Recommender | None = None
        self.worker: IngestWorker | None = None
        self.ready = threading.Event()
        self.load_error: str | None = None
        self._event_lock = threading.Lock()
        self._next_event_id = int(time.time() * 1000) * 1000
        self._spool_lock = threading.Lock()
        self._log_lock = threading.Lock()

    def attach(self, index: HnswIndex, catalog: CatalogStore, pca: PcaModel | None,
               worker: IngestWorker | None = None) -> None:
        self.index, self.catalog, self.pca, self.worker = index, catalog, pca, worker
        self.recommender = Recommender(index, catalog, self.cfg.reco)
        if worker is not None:
            worker.start()
        self.ready.set()

    def next_event_id(self) -> int:
        with self._event_lock:
            self._next_event_id += 1
            return self._next_event_id

    def spool(self, ev: ListingEvent) -> None:
        path = self.cfg.spool_path
        if not path:
            raise RuntimeError("no ingest worker and no spool path configured")
        with self._spool_lock, open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(ev.to_dict()) + "\n")

    def log_request(self, route: str, status: int, latency_ms: float) -> None:
        record = {"ts": format_timestamp(datetime.now(timezone.utc)), "route": route,
                  "status": status, "latency_ms": round(latency_ms, 3)}
        if self.cfg.request_log:
            with self._log_lock, open(self.cfg.request_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        else:
            logger.debug("request %s", record)


def load_from_disk(state: ServiceState, worker_factory: Callable | None = None) -> None:
    cfg = state.cfg
    cfg.check_paths()
    index = HnswIndex.load(cfg.index_path)
    catalog = CatalogStore.load(cfg.catalog_path) if cfg.catalog_path else CatalogStore()
    pca = PcaModel.load(cfg.pca_path) if cfg.pca_path else None
    worker = worker_factory(index, catalog, pca) if worker_factory else None
    state.attach(index, catalog, pca, worker)


def _error(status: int, code: str, **extra) -> JSONResponse:
    return JSONResponse({"error": code, **extra}, status_code=status)


def create_app(
    cfg: ServiceConfig,
    state: ServiceState | None = None,
    loader: Callable[[ServiceState], None] | None = None,
    flush_on_shutdown: bool = True,
) -> FastAPI:
    """Build the app. With ``loader``, loading runs in a background thread
    at startup and requests get 503 until it finishes."""
    state = state or ServiceState(cfg)
    gate = {"in_flight": 0}

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if loader is not None and not state.ready.is_set():
            def run():
                try:
                    loader(state)
                except Exception as exc:  # noqa: BLE001
                    logger.exception("index load failed")
                    state.load_error = str(exc)
            threading.Thread(target=run, name="index-loader", daemon=True).start()
        yield
        if state.worker is not None:
            state.worker.drain()
            state.worker.stop()
            if flush_on_shutdown and state.worker.stats().processed and cfg.index_path:
                state.index.save(cfg.index_path)
                if cfg.catalog_path:
                    state.catalog.save(cfg.catalog_path)
                logger.info("flushed index snapshot to %s", cfg.index_path)

    app = FastAPI(title="visrec", lifespan=lifespan)
    app.state.visrec = state

    @app.middleware("http")
    async def request_log(request: Request, call_next):
        t0 = time.perf_counter()
        response = await call_next(request)
        route = request.scope.get("route")
        state.log_request(getattr(route, "path", request.url.path), response.status_code,
                          (time.perf_counter() - t0) * 1000)
        return response

    def admit() -> bool:
        # handlers run on one event loop, so a plain counter is race-free
        if gate["in_flight"] >= cfg.max_concurrent_requests:
            return False
        gate["in_flight"] += 1
        return True

    def release() -> None:
        gate["in_flight"] -= 1

    @app.get("/v1/healthz")
    async def healthz():
        if not state.ready.is_set():
            body = {"status": "loading"}
            if state.load_error:
                body = {"status": "error", "error": state.load_error}
            return JSONResponse(body, status_code=503)
        return {"status": "ok", "index_size": len(state.index)}

    @app.get("/v1/stats")
    async def stats():
        if not state.ready.is_set():
            return _error(503, "index_loading")
        s = state.worker.stats() if state.worker else IngestStats(index_size=len(state.index))
        p: AnnParams = state.index.params
        body = s.to_dict()
        body["index"] = {"dim": state.index.dim, "size": len(state.index), "tombstones": state.index.tombstones,
                         "M": p.M, "ef_construction": p.ef_construction, "ef_search": p.ef_search,
                         "seed": p.seed, "backend": state.index.backend}
        body["pending_events"] = state.worker.pending() if state.worker else 0
        return body

    @app.get("/v1/items/{item_id}/similar")
    async def similar(item_id: str, k: str | None = None, price_ratio: str | None = None, ef: str | None = None):
        if not state.ready.is_set():
            return _error(503, "index_loading")
        try:
            qid = parse_item_id(item_id)
        except InvalidItem:
            return _error(400, "bad_item_id")
        base = cfg.reco
        try:
            k_val = int(k) if k is not None else base.k_final
            ratio = float(price_ratio) if price_ratio is not None else base.price_ratio
            ef_val = int(ef) if ef is not None else base.ef
            params = replace(base, k_final=k_val, k_retrieve=max(base.k_retrieve, k_val),
                             price_ratio=ratio, ef=ef_val)
        except ValueError as exc:
            return _error(400, "bad_params", detail=str(exc))
        if not admit():
            return _error(429, "too_many_requests")
        try:
            result = await asyncio.wait_for(
                run_in_threadpool(state.recommender.recommend, qid, params),
                timeout=cfg.request_timeout_ms / 1000.0,
            )
        except UnknownItem:
            return _error(404, "unknown_item")
        except asyncio.TimeoutError:
            return _error(504, "timeout")
        finally:
            release()
        body = {
            "query_item_id": qid,
            "results": [r.to_dict() for r in result.results],
            "params_used": {"k": params.k_final, "k_retrieve": params.k_retrieve,
                            "price_ratio": params.price_ratio,
                            "ef": params.ef if params.ef is not None else state.index.params.ef_search,
                            "include_query_category_tiers": params.include_query_category_tiers},
        }
        if result.reason:
            body["reason"] = result.reason
        return body

    @app.post("/v1/items", status_code=202)
    async def post_item(request: Request):
        if not state.ready.is_set():
            return _error(503, "index_loading")
        try:
            data = await request.json()
            item = Item.from_dict(data)
        except (ValueError, InvalidItem, TypeError) as exc:
            return _error(400, "bad_item", detail=str(exc))
        if not admit():
            return _error(429, "too_many_requests")
        try:
            kind = "updated" if item.id in state.catalog else "listed"
            ev = ListingEvent(kind, state.next_event_id(), item)
            if state.worker is not None:
                state.worker.submit(ev)
            else:
                state.spool(ev)
        except QueueFull:
            return _error(429, "queue_full")
        finally:
            release()
        return JSONResponse({"event_id": ev.event_id}, status_code=202)

    return app


def serve(cfg: ServiceConfig, worker_factory: Callable | None = None) -> None:
    import uvicorn

    cfg.check_paths()
    app = create_app(cfg, loader=lambda st: load_from_disk(st, worker_factory))
    host, port = cfg.host_port
    uvicorn.run(app, host=host, port=port, log_level="info", timeout_graceful_shutdown=10)
