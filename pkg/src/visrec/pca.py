"""PCA projection fitted by exact eigen-decomposition of the sample covariance."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import Embedding, as_array
from .errors import DimensionMismatch, InsufficientData, SnapshotError

SNAPSHOT_MAGIC = b"VRPC"
SNAPSHOT_VERSION = 1
EIGEN_TIE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Fitted projection from ``input_dim`` to ``output_dim``.

    Parameters are held as float32, the precision they are stored with on
    disk, so a loaded snapshot transforms identically to the fitted model.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    total_variance: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float32).reshape(-1)
        comps = np.asarray(self.components, dtype=np.float32)
        eig = np.asarray(self.eigenvalues, dtype=np.float32).reshape(-1)
        if comps.ndim != 2 or comps.shape[1] != mean.shape[0] or comps.shape[0] != eig.shape[0]:
            raise DimensionMismatch("inconsistent PCA model shapes")
        if comps.shape[0] < 1 or comps.shape[0] > comps.shape[1]:
            raise DimensionMismatch("output_dim must be in [1, input_dim]")
        for arr in (mean, comps, eig):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "eigenvalues", eig)
        object.__setattr__(self, "total_variance", float(self.total_variance))

    @property
    def input_dim(self) -> int:
        return int(self.components.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.components.shape[0])

    def transform(self, e) -> Embedding:
        x = as_array(e)
        if x.shape[0] != self.input_dim:
            raise DimensionMismatch(f"expected dim {self.input_dim}, got {x.shape[0]}")
        return Embedding(self._project(x[None, :])[0])

    def transform_batch(self, matrix) -> np.ndarray:
        x = np.asarray(matrix, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (n, {self.input_dim}) array, got {x.shape}")
        return self._project(x).astype(np.float32)

    def _project(self, x: np.ndarray) -> np.ndarray:
        centered = x.astype(np.float64) - self.mean.astype(np.float64)
        return centered @ self.components.astype(np.float64).T

    def explained_variance_ratio(self) -> list[float]:
        if self.total_variance <= 0:
            return [0.0] * self.output_dim
        ratios = self.eigenvalues.astype(np.float64) / self.total_variance
        return [float(min(1.0, max(0.0, r))) for r in ratios]

    # -- snapshots -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        body = b"".join([
            SNAPSHOT_MAGIC,
            struct.pack("<III", SNAPSHOT_VERSION, self.input_dim, self.output_dim),
            self.mean.astype("<f4").tobytes(),
            self.components.astype("<f4").tobytes(),
            self.eigenvalues.astype("<f4").tobytes(),
            struct.pack("<d", self.total_variance),
        ])
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PcaModel":
        if len(data) < 24 or data[:4] != SNAPSHOT_MAGIC:
            raise SnapshotError("not a PCA model snapshot")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise SnapshotError("PCA snapshot CRC mismatch")
        version, D, d = struct.unpack_from("<III", body, 4)
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported PCA snapshot version {version}")
        expected = 16 + 4 * (D + d * D + d) + 8
        if len(body) != expected:
            raise SnapshotError(f"PCA snapshot size {len(body)} != expected {expected}")
        off = 16
        mean = np.frombuffer(body, "<f4", D, off)
        off += 4 * D
        comps = np.frombuffer(body, "<f4", d * D, off).reshape(d, D)
        off += 4 * d * D
        eig = np.frombuffer(body, "<f4", d, off)
        off += 4 * d
        (total,) = struct.unpack_from("<d", body, off)
        return cls(mean, comps, eig, total)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "PcaModel":
        return cls.from_bytes(Path(path).read_bytes())


def _as_matrix(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        x = corpus
    else:
        rows = [as_array(e) for e in corpus]
        if not rows:
            raise InsufficientData("empty corpus")
        dims = {r.shape[0] for r in rows}
        if len(dims) != 1:
            raise DimensionMismatch(f"corpus mixes dimensions {sorted(dims)}")
        x = np.stack(rows)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("corpus must be 2-D")
    if not np.all(np.isfinite(x)):
        raise ValueError("corpus contains NaN or Inf")
    return x


def covariance(x: np.ndarray, chunk_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Mean and 1/(n-1) covariance, accumulated over row chunks."""
    n, D = x.shape
    mean = np.zeros(D, dtype=np.float64)
    for start in range(0, n, chunk_size):
        mean += x[start:start + chunk_size].sum(axis=0)
    mean /= n
    cov = np.zeros((D, D), dtype=np.float64)
    for start in range(0, n, chunk_size):
        c = x[start:start + chunk_size] - mean
        cov += c.T @ c
    cov /= n - 1
    return mean, (cov + cov.T) / 2


def orient_and_order(eigvals: np.ndarray, eigvecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the sign convention and descending order to eigenpairs.

    ``eigvecs`` holds eigenvectors as columns. Each vector is flipped so its
    largest-magnitude coordinate is positive. Eigenvalues within
    ``EIGEN_TIE_TOL`` of each other are ordered by the index of that
    coordinate. Returns ``(values, rows)`` with eigenvectors as rows.
    """
    vecs = eigvecs.T.copy()
    peak = np.argmax(np.abs(vecs), axis=1)
    signs = np.where(vecs[np.arange(len(vecs)), peak] < 0, -1.0, 1.0)
    vecs *= signs[:, None]

    order = sorted(range(len(eigvals)), key=lambda i: -eigvals[i])
    ranked: list[int] = []
    group = [order[0]]
    for i in order[1:]:
        if abs(eigvals[group[-1]] - eigvals[i]) <= EIGEN_TIE_TOL:
            group.append(i)
        else:
            ranked.extend(sorted(group, key=lambda j: peak[j]))
            group = [i]
    ranked.extend(sorted(group, key=lambda j: peak[j]))
    return np.asarray(eigvals)[ranked], vecs[ranked]


def fit(corpus: Sequence[Embedding] | np.ndarray, d: int, chunk_size: int = 4096) -> PcaModel:
    """Fit a ``D -> d`` projection on the top-``d`` covariance eigenvectors."""
    if d < 1:
        raise ValueError("d must be >= 1")
    x = _as_matrix(corpus)
    n, D = x.shape
    if d > D:
        raise DimensionMismatch(f"d={d} exceeds input dim {D}")
    if n < d or n < 2:
        raise InsufficientData(f"corpus of {n} embeddings cannot fit d={d}")
    mean, cov = covariance(x, chunk_size)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals, 0.0, None)
    total = float(np.trace(cov))
    values, rows = orient_and_order(eigvals, eigvecs)
    return PcaModel(mean, rows[:d], values[:d], total)
