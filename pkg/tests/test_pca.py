import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visrec import pca
from visrec.domain import Embedding
from visrec.errors import DimensionMismatch, InsufficientData, SnapshotError


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, sweeps: int = 100):
    """Cyclic Jacobi rotations; independent of LAPACK. Returns (values, columns)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def naive_covariance(x):
    n, d = x.shape
    mean = [sum(x[i, j] for i in range(n)) / n for j in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(a, d):
            cov[a, b] = cov[b, a] = sum((x[i, a] - mean[a]) * (x[i, b] - mean[b]) for i in range(n)) / (n - 1)
    return np.array(mean), cov


def oriented(vec):
    vec = np.asarray(vec, dtype=np.float64)
    return vec if vec[np.argmax(np.abs(vec))] > 0 else -vec


def test_line_example():
    pts = np.array([[t, 2 * t] for t in range(-2, 3)], dtype=float)
    m = pca.fit(pts, 2)
    np.testing.assert_allclose(m.components[0], np.array([1, 2]) / math.sqrt(5), atol=1e-6)
    assert m.eigenvalues[1] == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(m.transform([1, 2]).values, [math.sqrt(5), 0.0], atol=1e-5)
    ratio = m.explained_variance_ratio()
    assert ratio[0] == pytest.approx(1.0, abs=1e-6) and ratio[1] == pytest.approx(0.0, abs=1e-6)


def test_axis_variances():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4000, 2)) * np.array([2.0, 1.0])
    m = pca.fit(x, 2)
    _, cov = naive_covariance(x)
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(-vals)
    np.testing.assert_allclose(m.eigenvalues, vals[order], rtol=1e-5)
    assert m.eigenvalues[0] == pytest.approx(4, rel=0.1) and m.eigenvalues[1] == pytest.approx(1, rel=0.1)
    assert abs(m.components[0][0]) > 0.99


def test_isotropic_ratio():
    rng = np.random.default_rng(6)
    m = pca.fit(rng.standard_normal((5000, 2)), 2)
    np.testing.assert_allclose(m.explained_variance_ratio(), [0.5, 0.5], atol=0.03)
    assert len(pca.fit(rng.standard_normal((20, 3)), 1).explained_variance_ratio()) == 1


def test_eigen_oracle_200x32():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((200, 32)) @ np.diag(np.linspace(3, 0.2, 32)) @ np.linalg.qr(rng.standard_normal((32, 32)))[0]
    m = pca.fit(x, 32)
    mean, cov = naive_covariance(x)
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(-vals)
    np.testing.assert_allclose(m.mean, mean, atol=1e-6)
    np.testing.assert_allclose(m.eigenvalues, vals[order], atol=1e-5)
    for row, j in zip(m.components, order):
        np.testing.assert_allclose(row, oriented(vecs[:, j]), atol=1e-5)


def test_sign_convention_and_tie_order():
    # tied spectrum: eigenvalues equal, vectors are the axes
    x = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    m = pca.fit(x, 3)
    np.testing.assert_allclose(m.components, np.eye(3), atol=1e-9)
    vals, vecs = pca.orient_and_order(np.array([1.0, 1.0 + 5e-10, 2.0]), np.array([[0, -1, 0], [-1, 0, 0], [0, 0, 1.0]]))
    np.testing.assert_array_equal(vals, [2.0, 1.0 + 5e-10, 1.0])
    np.testing.assert_array_equal(vecs, [[0, 0, 1], [1, 0, 0], [0, 1, 0]])


def test_full_rank_preserves_distances():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((60, 8))
    m = pca.fit(x, 8)
    y = m.transform_batch(x).astype(np.float64)
    for i, j in itertools.combinations(range(20), 2):
        assert np.linalg.norm(y[i] - y[j]) == pytest.approx(np.linalg.norm(x[i] - x[j]), abs=1e-4)


def test_transform_edge_cases():
    m = pca.PcaModel(np.zeros(3), np.eye(3), np.ones(3), 3.0)
    np.testing.assert_array_equal(m.transform([1, 2, 3]).values, [1, 2, 3])
    rng = np.random.default_rng(0)
    fitted = pca.fit(rng.standard_normal((50, 6)), 3)
    np.testing.assert_allclose(fitted.transform(fitted.mean).values, np.zeros(3), atol=1e-6)
    with pytest.raises(DimensionMismatch):
        fitted.transform([1.0, 2.0])


def test_transform_matches_naive_matvec():
    rng = np.random.default_rng(8)
    m = pca.fit(rng.standard_normal((80, 10)), 4)
    e = rng.standard_normal(10)
    naive = [sum(float(m.components[r, c]) * (e[c] - float(m.mean[c])) for c in range(10)) for r in range(4)]
    np.testing.assert_allclose(m.transform(e).values, naive, atol=1e-5)


def test_reconstruction_beats_axis_subsets():
    rng = np.random.default_rng(9)
    for trial in range(5):
        x = rng.standard_normal((50, 8)) * rng.uniform(0.2, 3, size=8) + rng.standard_normal((50, 1)) * rng.uniform(-1, 1, 8)
        for d in (1, 2, 3):
            m = pca.fit(x, d)
            c = m.components.astype(np.float64)
            centered = x - m.mean.astype(np.float64)
            err = np.mean(np.sum((centered - centered @ c.T @ c) ** 2, axis=1))
            for subset in itertools.combinations(range(8), d):
                p = np.eye(8)[list(subset)]
                alt = np.mean(np.sum((centered - centered @ p.T @ p) ** 2, axis=1))
                assert err <= alt + 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_orthonormal_components(dim, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((dim + 5, dim)) * rng.uniform(0.1, 5, size=dim)
    m = pca.fit(x, dim)
    c = m.components.astype(np.float64)
    assert np.max(np.abs(c @ c.T - np.eye(dim))) <= 1e-5
    assert np.all(np.diff(m.eigenvalues) <= 0)
    assert sum(m.explained_variance_ratio()) <= 1 + 1e-6


def test_chunk_independence():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((300, 12))
    a, b = pca.fit(x, 5, chunk_size=7), pca.fit(x, 5, chunk_size=4096)
    np.testing.assert_allclose(a.components, b.components, atol=1e-6)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-6)


def test_fit_errors_and_embedding_input():
    with pytest.raises(InsufficientData):
        pca.fit(np.ones((1, 3)), 1)
    with pytest.raises(InsufficientData):
        pca.fit(np.random.default_rng(0).standard_normal((3, 5)), 4)
    with pytest.raises(DimensionMismatch):
        pca.fit([Embedding([1, 2]), Embedding([1, 2, 3])], 1)
    m = pca.fit([Embedding([1, 2]), Embedding([2, 4.5]), Embedding([3, 6])], 1)
    assert m.output_dim == 1 and m.input_dim == 2


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    m = pca.fit(rng.standard_normal((100, 16)), 6)
    path = tmp_path / "m.vrpc"
    m.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"VRPC" and len(raw) == 4 + 12 + 4 * (16 + 6 * 16 + 6) + 8 + 4
    back = pca.PcaModel.load(path)
    e = rng.standard_normal(16)
    np.testing.assert_allclose(back.transform(e).values, m.transform(e).values, atol=1e-7)
    assert back.total_variance == m.total_variance
    corrupt = bytearray(raw)
    corrupt[20] ^= 0xFF
    with pytest.raises(SnapshotError):
        pca.PcaModel.from_bytes(bytes(corrupt))
    with pytest.raises(SnapshotError):
        pca.PcaModel.from_bytes(raw[:30])
