"""``visrec`` command line.

Every subcommand accepts ``--config FILE``; values resolve as
flags > ``VISREC_<SECTION>_<KEY>`` environment > config file > defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import pca as pca_mod
from .ann import AnnParams, HnswIndex, available_backends
from .config import load_config
from .domain import CatalogStore, load_embeddings, normalize_rows, read_catalog, save_embeddings, write_catalog
from .encoder import EncoderConfig, SyntheticEncoder, make_encoder
from .errors import VisrecError
from .evaluation import evaluate_log, replay_compare
from .ingest import IngestWorker
from .reco import RecoParams
from .synth import generate_catalog

logger = logging.getLogger("visrec")


def _ks(text: str) -> list[int]:
    try:
        ks = [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from exc
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _resolve(args) -> dict:
    overrides = {
        "service": {"index_path": getattr(args, "index", None), "pca_path": getattr(args, "pca", None),
                    "catalog_path": getattr(args, "catalog", None), "listen_addr": getattr(args, "listen", None),
                    "request_log": getattr(args, "request_log", None), "spool_path": getattr(args, "spool", None)},
        "ann": {"M": getattr(args, "M", None), "ef_construction": getattr(args, "ef_construction", None),
                "ef_search": getattr(args, "ef_search", None), "seed": getattr(args, "seed", None)},
        "pca": {"dim": getattr(args, "pca_dim", None)},
        "encoder": {"mode": getattr(args, "encoder", None), "synthetic_noise": getattr(args, "noise", None)},
        "ingest": {"lanes": getattr(args, "lanes", None), "dead_letter_path": getattr(args, "dead_letter", None)},
    }
    return load_config(args.config, overrides=overrides)


def _ann_params(cfg: dict) -> AnnParams:
    return AnnParams(**cfg["ann"])


def _reco_params(cfg: dict) -> RecoParams:
    return RecoParams(**cfg["reco"])


def _encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig(**cfg["encoder"])


def _worker(cfg: dict, index, catalog, pca) -> IngestWorker:
    ing = cfg["ingest"]
    return IngestWorker(index, catalog, pca, make_encoder(_encoder_config(cfg)), lanes=ing["lanes"],
                        dead_letter_path=ing["dead_letter_path"], retry_attempts=ing["retry_attempts"],
                        backoff_ms=ing["backoff_ms"], queue_capacity=cfg["service"]["queue_capacity"])


def _open_index(path: str, dim: int, params: AnnParams) -> HnswIndex:
    if Path(path).exists():
        return HnswIndex.load(path, ef_search=params.ef_search)
    return HnswIndex(dim, params)


# --- subcommands ----------------------------------------------------------------


def cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    cfg = _resolve(args)
    svc = cfg["service"]
    scfg = ServiceConfig(
        listen_addr=svc["listen_addr"], index_path=svc["index_path"], pca_path=svc["pca_path"],
        catalog_path=svc["catalog_path"], reco=_reco_params(cfg), request_timeout_ms=svc["request_timeout_ms"],
        max_concurrent_requests=svc["max_concurrent_requests"], queue_capacity=svc["queue_capacity"],
        spool_path=svc["spool_path"], request_log=svc["request_log"],
    )
    factory = None
    if args.with_ingest:
        def factory(index, catalog, pca):
            return _worker(cfg, index, catalog, pca)
    elif not scfg.spool_path:
        scfg.spool_path = str(Path(scfg.index_path).with_suffix(".spool.jsonl"))
    serve(scfg, factory)
    return 0


def cmd_ingest(args) -> int:
    cfg = _resolve(args)
    svc = cfg["service"]
    pca = pca_mod.PcaModel.load(svc["pca_path"])
    index = _open_index(svc["index_path"], pca.output_dim, _ann_params(cfg))
    catalog = CatalogStore.load(svc["catalog_path"]) if Path(svc["catalog_path"]).exists() else CatalogStore()
    worker = _worker(cfg, index, catalog, pca)
    stats = worker.run_events(args.events)
    index.save(svc["index_path"])
    catalog.save(svc["catalog_path"])
    _emit(stats.to_dict(), None)
    return 0 if stats.failed == 0 else 3


def cmd_backfill(args) -> int:
    cfg = _resolve(args)
    svc = cfg["service"]
    if args.fit_pca:
        pca = None
        dim = cfg["pca"]["dim"]
    else:
        pca = pca_mod.PcaModel.load(svc["pca_path"])
        dim = pca.output_dim
    index = HnswIndex(dim, _ann_params(cfg))
    catalog = CatalogStore()
    worker = _worker(cfg, index, catalog, pca)
    stats = worker.run_backfill(args.catalog_file, fit_pca=args.fit_pca, pca_dim=dim)
    if args.fit_pca:
        worker.pca.save(svc["pca_path"])
    index.save(svc["index_path"])
    if args.catalog_out:
        catalog.save(args.catalog_out)
    _emit(stats.to_dict(), None)
    return 0 if stats.failed == 0 else 3


def cmd_pca_fit(args) -> int:
    cfg = _resolve(args)
    _, vectors = load_embeddings(args.embeddings)
    model = pca_mod.fit(vectors, cfg["pca"]["dim"])
    out = args.out or cfg["service"]["pca_path"]
    model.save(out)
    ratio = model.explained_variance_ratio()
    _emit({"input_dim": model.input_dim, "output_dim": model.output_dim, "n": int(vectors.shape[0]),
           "explained_variance": float(sum(ratio)), "out": str(out)}, None)
    return 0


def cmd_index_build(args) -> int:
    cfg = _resolve(args)
    ids, vectors = load_embeddings(args.embeddings)
    if args.pca_model:
        vectors = pca_mod.PcaModel.load(args.pca_model).transform_batch(vectors)
    vectors = normalize_rows(vectors)
    index = HnswIndex(vectors.shape[1], _ann_params(cfg))
    t0 = time.perf_counter()
    index.add_items(ids.tolist(), vectors)
    elapsed = time.perf_counter() - t0
    out = args.out or cfg["service"]["index_path"]
    index.save(out)
    _emit({"size": len(index), "dim": index.dim, "build_seconds": round(elapsed, 3),
           "backend": index.backend, "out": str(out)}, None)
    return 0


def cmd_eval(args) -> int:
    report = evaluate_log(args.log, args.ks)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_replay_compare(args) -> int:
    cfg = _resolve(args)
    catalog = CatalogStore(read_catalog(args.catalog_file))
    emb_a, emb_b = load_embeddings(args.embeddings_a), load_embeddings(args.embeddings_b)
    params = RecoParams(**{**cfg["reco"], "include_query_category_tiers": args.tiers})
    queries = None
    if args.queries:
        ids = sorted(int(i) for i in emb_a[0].tolist())
        rng = np.random.default_rng(args.query_seed)
        queries = sorted(int(i) for i in rng.choice(ids, size=min(args.queries, len(ids)), replace=False))
    report = replay_compare(catalog, emb_a, emb_b, ks=args.ks, params=params, ann_params=_ann_params(cfg),
                            labels=(args.label_a, args.label_b), queries=queries)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_synth_catalog(args) -> int:
    items = generate_catalog(args.n, roots=args.roots, parents=args.parents, leaves=args.leaves, seed=args.seed)
    write_catalog(args.out, items)
    _emit({"items": len(items), "out": args.out}, None)
    return 0


def cmd_encode(args) -> int:
    cfg = _resolve(args)
    enc_cfg = _encoder_config(cfg)
    encoder = make_encoder(enc_cfg)
    items = read_catalog(args.catalog_file)
    vectors = np.stack([encoder.encode(item).values for item in items])
    if args.pca_model:
        vectors = normalize_rows(pca_mod.PcaModel.load(args.pca_model).transform_batch(vectors))
    save_embeddings(args.out, [item.id for item in items], vectors)
    _emit({"items": len(items), "dim": int(vectors.shape[1]), "out": args.out}, None)
    return 0


def _recall(index: HnswIndex, data_ids: np.ndarray, data: np.ndarray, queries: np.ndarray, k: int, ef: int) -> tuple[float, list[float]]:
    truth = np.argsort(-(queries.astype(np.float64) @ data.T.astype(np.float64)), axis=1, kind="stable")[:, :k]
    hits, lat = 0, []
    for q, exact in zip(queries, truth):
        t0 = time.perf_counter()
        got = index.search(q, k, ef=ef)
        lat.append((time.perf_counter() - t0) * 1000)
        hits += len({nb.id for nb in got} & set(data_ids[exact].tolist()))
    return hits / (k * len(queries)), lat


def _service_latency(n_items: int, requests: int, backend: str | None, seed: int) -> dict:
    from fastapi.testclient import TestClient

    from .service import ServiceConfig, ServiceState, create_app

    catalog = CatalogStore(generate_catalog(n_items, roots=10, parents=10, leaves=10, seed=seed))
    enc = SyntheticEncoder(EncoderConfig(output_dim=128, synthetic_seed=seed))
    index = HnswIndex(128, AnnParams(), backend=backend)
    t0 = time.perf_counter()
    for item in catalog:
        index.insert(item.id, enc.encode(item).values)
    build = time.perf_counter() - t0
    cfg = ServiceConfig()
    state = ServiceState(cfg)
    state.attach(index, catalog, None)
    rng = np.random.default_rng(seed)
    ids = catalog.ids()
    lat = []
    with TestClient(create_app(cfg, state)) as client:
        for qid in rng.choice(ids, size=requests):
            t1 = time.perf_counter()
            resp = client.get(f"/v1/items/{int(qid)}/similar")
            lat.append((time.perf_counter() - t1) * 1000)
            resp.raise_for_status()
    return {"items": n_items, "requests": requests, "build_seconds": round(build, 2),
            "p50_ms": round(float(np.percentile(lat, 50)), 3), "p99_ms": round(float(np.percentile(lat, 99)), 3)}


def cmd_bench_recall(args) -> int:
    rng = np.random.default_rng(args.seed)
    data = normalize_rows(rng.standard_normal((args.n, args.dim)).astype(np.float32))
    queries = normalize_rows(rng.standard_normal((args.queries, args.dim)).astype(np.float32))
    data_ids = np.arange(1, args.n + 1, dtype=np.uint64)
    backends = available_backends() if args.backend == "all" else [args.backend]
    results = []
    for backend in backends:
        index = HnswIndex(args.dim, AnnParams(M=args.M, ef_construction=args.ef_construction), backend=backend)
        t0 = time.perf_counter()
        index.add_items(data_ids.tolist(), data)
        build = time.perf_counter() - t0
        per_ef = []
        for ef in args.ef:
            recall, lat = _recall(index, data_ids, data, queries, args.k, ef)
            per_ef.append({"ef": ef, f"recall@{args.k}": round(recall, 4),
                           "p50_ms": round(float(np.percentile(lat, 50)), 3),
                           "p99_ms": round(float(np.percentile(lat, 99)), 3)})
        results.append({"backend": index.backend, "build_seconds": round(build, 2), "searches": per_ef})
    payload = {"n": args.n, "dim": args.dim, "queries": args.queries, "k": args.k, "results": results}
    if args.service_items:
        payload["service"] = _service_latency(args.service_items, args.service_requests,
                                              None if args.backend == "all" else args.backend, args.seed)
    _emit(payload, args.out)
    return 0


# --- parser ---------------------------------------------------------------------


def _add_ann_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--M", type=int)
    p.add_argument("--ef-construction", type=int, dest="ef_construction")
    p.add_argument("--ef-search", type=int, dest="ef_search")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visrec", description="Visual similar-item recommendation toolkit.")
    parser.add_argument("--version", action="version", version=f"visrec {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--listen")
    p.add_argument("--index")
    p.add_argument("--pca")
    p.add_argument("--catalog")
    p.add_argument("--with-ingest", action="store_true", help="run the ingest worker in-process")
    p.add_argument("--lanes", type=int)
    p.add_argument("--dead-letter", dest="dead_letter")
    p.add_argument("--request-log", dest="request_log")
    p.add_argument("--spool", help="where POSTed events go without --with-ingest")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ingest", parents=[common], help="apply a listing-event file")
    p.add_argument("--events", required=True)
    p.add_argument("--index")
    p.add_argument("--pca")
    p.add_argument("--catalog")
    p.add_argument("--lanes", type=int)
    p.add_argument("--dead-letter", dest="dead_letter")
    p.add_argument("--encoder", choices=("remote", "synthetic"))
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("backfill", parents=[common], help="encode and index a whole catalog")
    p.add_argument("--catalog", dest="catalog_file", required=True)
    p.add_argument("--catalog-out", dest="catalog_out", help="write the accepted items here")
    p.add_argument("--fit-pca", action="store_true", dest="fit_pca")
    p.add_argument("--pca-dim", type=int, dest="pca_dim")
    p.add_argument("--index")
    p.add_argument("--pca")
    p.add_argument("--dead-letter", dest="dead_letter")
    p.add_argument("--encoder", choices=("remote", "synthetic"))
    p.add_argument("--noise", type=float)
    _add_ann_flags(p)
    p.set_defaults(func=cmd_backfill)

    p = sub.add_parser("pca-fit", parents=[common], help="fit a PCA model on an embeddings file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pca-dim", type=int, dest="pca_dim")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pca_fit)

    p = sub.add_parser("index-build", parents=[common], help="build an index snapshot from embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pca-model", dest="pca_model", help="project through this PCA model first")
    p.add_argument("--out")
    _add_ann_flags(p)
    p.set_defaults(func=cmd_index_build)

    p = sub.add_parser("eval", parents=[common], help="nDCG/precision over an interaction log")
    p.add_argument("--log", required=True)
    p.add_argument("--ks", type=_ks, default=[1, 3, 5])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay-compare", parents=[common], help="compare two embedding sets by replay")
    p.add_argument("--catalog", dest="catalog_file", required=True)
    p.add_argument("--embeddings-a", required=True, dest="embeddings_a")
    p.add_argument("--embeddings-b", required=True, dest="embeddings_b")
    p.add_argument("--label-a", default="a", dest="label_a")
    p.add_argument("--label-b", default="b", dest="label_b")
    p.add_argument("--ks", type=_ks, default=[1, 3, 5])
    p.add_argument("--tiers", action="store_true", help="keep the category re-rank on during replay")
    p.add_argument("--queries", type=int, help="sample this many query items")
    p.add_argument("--query-seed", type=int, default=0, dest="query_seed")
    p.add_argument("--out")
    _add_ann_flags(p)
    p.set_defaults(func=cmd_replay_compare)

    p = sub.add_parser("bench-recall", parents=[common], help="ANN recall and latency on random vectors")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--ef", type=_ks, default=[50, 100, 200, 400])
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--ef-construction", type=int, default=200, dest="ef_construction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=("all", "cython", "python"), default="all")
    p.add_argument("--service-items", type=int, default=0, dest="service_items",
                   help="also time /similar on a synthetic index of this size")
    p.add_argument("--service-requests", type=int, default=1000, dest="service_requests")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_recall)

    p = sub.add_parser("synth-catalog", help="write a synthetic catalog")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--roots", type=int, default=5)
    p.add_argument("--parents", type=int, default=4)
    p.add_argument("--leaves", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_catalog)

    p = sub.add_parser("encode", parents=[common], help="encode a catalog into an embeddings file")
    p.add_argument("--catalog", dest="catalog_file", required=True)
    p.add_argument("--encoder", choices=("remote", "synthetic"))
    p.add_argument("--noise", type=float)
    p.add_argument("--pca-model", dest="pca_model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (VisrecError, OSError, ValueError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
