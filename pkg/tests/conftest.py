import numpy as np
import pytest

from visrec.ann import AnnParams, HnswIndex, available_backends
from visrec.domain import CatalogStore, normalize_rows
from visrec.encoder import EncoderConfig, SyntheticEncoder
from visrec.synth import generate_catalog

BACKENDS = available_backends()


def unit_rows(n: int, dim: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return normalize_rows(rng.standard_normal((n, dim)).astype(np.float32))


def build(n: int, dim: int = 16, seed: int = 0, params: AnnParams | None = None, backend=None):
    data = unit_rows(n, dim, seed)
    index = HnswIndex(dim, params, backend=backend)
    index.add_items(range(1, n + 1), data)
    return index, data


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def small_catalog():
    return CatalogStore(generate_catalog(400, seed=3))


@pytest.fixture(scope="session")
def small_world(small_catalog):
    """400 synthetic items indexed with 32-d synthetic embeddings."""
    enc = SyntheticEncoder(EncoderConfig(output_dim=32, synthetic_seed=1))
    index = HnswIndex(32, AnnParams(M=8, ef_construction=64))
    for item in small_catalog:
        index.insert(item.id, enc.encode(item).values)
    return small_catalog, index


ACCEPTANCE_LINES: list[str] = []


def pytest_runtest_makereport(item, call):
    criterion = item.get_closest_marker("criterion")
    if criterion is None or call.when != "call":
        return
    status = "PASS" if call.excinfo is None else "FAIL"
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    ACCEPTANCE_LINES.append(f"[{status}] criterion {criterion.args[0]}: {criterion.args[1]} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
