"""Compiled vs pure-Python HNSW kernels: build time, query latency, agreement.

    python3 benchmarks/bench_kernels.py --n 2000 --queries 200
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from visrec.ann import AnnParams, HnswIndex, available_backends
from visrec.domain import normalize_rows


def run(backend: str, data: np.ndarray, queries: np.ndarray, k: int, ef: int) -> dict:
    index = HnswIndex(data.shape[1], AnnParams(), backend=backend)
    t0 = time.perf_counter()
    index.add_items(range(1, len(data) + 1), data)
    build = time.perf_counter() - t0
    lat, ids = [], []
    for q in queries:
        t1 = time.perf_counter()
        got = index.search(q, k, ef=ef)
        lat.append((time.perf_counter() - t1) * 1000)
        ids.append([nb.id for nb in got])
    lat_arr = np.asarray(lat)
    return {
        "backend": backend,
        "build_seconds": round(build, 3),
        "inserts_per_second": round(len(data) / build, 1),
        "query_p50_ms": round(float(np.percentile(lat_arr, 50)), 4),
        "query_p99_ms": round(float(np.percentile(lat_arr, 99)), 4),
        "_ids": ids,
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--ef", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    data = normalize_rows(rng.standard_normal((args.n, args.dim)).astype(np.float32))
    queries = normalize_rows(rng.standard_normal((args.queries, args.dim)).astype(np.float32))

    rows = [run(b, data, queries, args.k, args.ef) for b in available_backends()]
    report = {"n": args.n, "dim": args.dim, "queries": args.queries, "k": args.k, "ef": args.ef}
    if len(rows) == 2:
        a, b = rows[0].pop("_ids"), rows[1].pop("_ids")
        same = sum(x == y for x, y in zip(a, b))
        report["identical_result_lists"] = f"{same}/{len(a)}"
        report["build_speedup"] = round(rows[1]["build_seconds"] / rows[0]["build_seconds"], 2)
        report["query_p50_speedup"] = round(rows[1]["query_p50_ms"] / rows[0]["query_p50_ms"], 2)
    else:
        rows[0].pop("_ids")
    report["backends"] = rows
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
