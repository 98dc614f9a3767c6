"""Sources of raw image embeddings.

``RemoteEncoder`` is the client for an external image-encoder service:

    POST <endpoint>   {"image_ref": "..."}   ->   {"embedding": [float, ...]}

``SyntheticEncoder`` is a deterministic stand-in that places items of the
same category near a shared centroid, for desk-scale runs and tests.
"""
from __future__ import annotations

import concurrent.futures
import hashlib
import logging
import math
import os
from dataclasses import dataclass

import httpx
import numpy as np

from .domain import Embedding, Item
from .errors import BadDimension, BadPayload, EncoderTimeout, RemoteUnavailable

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "VISREC_ENCODER_ENDPOINT"
DEFAULT_NOISE = 0.35


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "synthetic"
    remote_endpoint: str | None = None
    output_dim: int = 768
    timeout_ms: int = 2000
    synthetic_seed: int = 0
    synthetic_noise: float = DEFAULT_NOISE

    def __post_init__(self):
        if self.mode not in ("remote", "synthetic"):
            raise ValueError(f"encoder mode must be 'remote' or 'synthetic', got {self.mode!r}")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be > 0")
        if self.synthetic_noise < 0:
            raise ValueError("synthetic_noise must be >= 0")

    @property
    def endpoint(self) -> str | None:
        return os.environ.get(ENDPOINT_ENV) or self.remote_endpoint


def _seed_from(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _unit_gaussian(seed: int, dim: int) -> np.ndarray:
    g = np.random.default_rng(seed).standard_normal(dim)
    return g / math.sqrt(float(g @ g))


class SyntheticEncoder:
    """Pure function of ``(seed, category path, item id)``.

    The category centroid sums one seeded random direction per path prefix,
    so sibling leaves share their parent's direction and sit closer together
    than unrelated categories. Item noise is a random direction scaled to
    ``noise`` times the centroid norm.
    """

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg

    def centroid(self, levels) -> np.ndarray:
        levels = tuple(levels)
        dim = self.cfg.output_dim
        acc = np.zeros(dim, dtype=np.float64)
        for depth in range(1, len(levels) + 1):
            acc += _unit_gaussian(_seed_from(self.cfg.synthetic_seed, "cat", *levels[:depth]), dim)
        return acc / math.sqrt(float(acc @ acc))

    def encode_vector(self, item_id: int, levels) -> np.ndarray:
        levels = tuple(levels)
        c = self.centroid(levels)
        noise = _unit_gaussian(_seed_from(self.cfg.synthetic_seed, "item", item_id, *levels), self.cfg.output_dim)
        v = c + self.cfg.synthetic_noise * noise
        return (v / math.sqrt(float(v @ v))).astype(np.float32)

    def encode(self, item: Item) -> Embedding:
        return Embedding(self.encode_vector(item.id, item.category.levels), normalized=True)


class RemoteEncoder:
    """HTTP client for the image-encoder service; safe to share across threads."""

    def __init__(self, cfg: EncoderConfig, transport: httpx.BaseTransport | None = None):
        if not cfg.endpoint:
            raise ValueError("remote encoder requires an endpoint")
        self.cfg = cfg
        self.endpoint = cfg.endpoint
        timeout = cfg.timeout_ms / 1000.0
        self._client = httpx.Client(timeout=httpx.Timeout(timeout), transport=transport)
        self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=16, thread_name_prefix="encoder")

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, image_ref: str) -> httpx.Response:
        try:
            return self._client.post(self.endpoint, json={"image_ref": image_ref})
        except httpx.TimeoutException as exc:
            raise EncoderTimeout(f"encoder timed out after {self.cfg.timeout_ms} ms") from exc
        except httpx.TransportError as exc:
            raise RemoteUnavailable(f"encoder unreachable: {exc}") from exc

    def encode_ref(self, image_ref: str) -> Embedding:
        # hard overall deadline: httpx timeouts apply per phase, not end to end
        fut = self._pool.submit(self._post, image_ref)
        try:
            resp = fut.result(timeout=self.cfg.timeout_ms / 1000.0)
        except concurrent.futures.TimeoutError as exc:
            fut.cancel()
            raise EncoderTimeout(f"encoder timed out after {self.cfg.timeout_ms} ms") from exc
        if resp.status_code >= 500:
            raise RemoteUnavailable(f"encoder returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BadPayload(f"encoder returned HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise BadPayload("encoder response is not JSON") from exc
        values = body.get("embedding") if isinstance(body, dict) else None
        if not isinstance(values, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
        ):
            raise BadPayload("encoder response lacks a numeric 'embedding' array")
        if len(values) != self.cfg.output_dim:
            raise BadDimension(f"encoder returned {len(values)} values, expected {self.cfg.output_dim}")
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or not np.all(np.isfinite(arr.astype(np.float32))):
            raise BadPayload("encoder returned non-finite values")
        return Embedding(arr)

    def encode(self, item: Item) -> Embedding:
        return self.encode_ref(item.image_ref)


def make_encoder(cfg: EncoderConfig):
    if cfg.mode == "remote":
        return RemoteEncoder(cfg)
    return SyntheticEncoder(cfg)


def encode_remote(cfg: EncoderConfig, image_ref: str) -> Embedding:
    if cfg.mode != "remote":
        raise ValueError("encode_remote requires mode 'remote'")
    with RemoteEncoder(cfg) as enc:
        return enc.encode_ref(image_ref)


def encode_synthetic(cfg: EncoderConfig, item: Item) -> Embedding:
    if cfg.mode != "synthetic":
        raise ValueError("encode_synthetic requires mode 'synthetic'")
    return SyntheticEncoder(cfg).encode(item)


__all__ = [
    "EncoderConfig", "SyntheticEncoder", "RemoteEncoder", "make_encoder",
    "encode_remote", "encode_synthetic",
]
