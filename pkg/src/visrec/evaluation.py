"""Offline ranking evaluation: nDCG@k / precision@k over interaction logs.

Relevance is binary (tapped = 1). Records without taps have no defined
nDCG, so they are excluded from nDCG means but still count towards
precision means.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .ann import AnnParams, HnswIndex
from .domain import CatalogStore, Item, ItemId, normalize_rows, parse_item_id
from .errors import AlignmentError, InvalidItem, MalformedLog, UndefinedMetric
from .reco import RecoParams, Recommender


def dcg_at_k(relevances: Sequence[int], k: int) -> float:
    return sum(rel / math.log2(i + 2) for i, rel in enumerate(relevances[:k]))


def ndcg_at_k(relevances: Sequence[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevances:
        raise ValueError("relevances must be non-empty")
    ideal = dcg_at_k(sorted(relevances, reverse=True), k)
    if ideal == 0:
        raise UndefinedMetric("all relevances are zero")
    return dcg_at_k(relevances, k) / ideal


def precision_at_k(relevances: Sequence[int], k: int) -> float:
    # divides by k even when fewer than k items were shown
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(1 for rel in relevances[:k] if rel) / k


@dataclass(frozen=True)
class InteractionRecord:
    query_item_id: ItemId
    shown: tuple[ItemId, ...]
    tapped: frozenset[ItemId]

    def __post_init__(self):
        if not self.shown:
            raise ValueError("shown must be non-empty")
        if len(set(self.shown)) != len(self.shown):
            raise ValueError("shown contains duplicates")
        if not set(self.tapped) <= set(self.shown):
            raise ValueError("tapped must be a subset of shown")

    @property
    def relevances(self) -> list[int]:
        return [1 if i in self.tapped else 0 for i in self.shown]

    @classmethod
    def from_dict(cls, data: dict) -> "InteractionRecord":
        return cls(
            query_item_id=parse_item_id(data["query_item_id"]),
            shown=tuple(parse_item_id(i) for i in data["shown"]),
            tapped=frozenset(parse_item_id(i) for i in data["tapped"]),
        )

    def to_dict(self) -> dict:
        return {"query_item_id": self.query_item_id, "shown": list(self.shown), "tapped": sorted(self.tapped)}


def read_log(path: str | Path) -> list[InteractionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                if not isinstance(data, dict):
                    raise ValueError("record is not a JSON object")
                records.append(InteractionRecord.from_dict(data))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, InvalidItem) as exc:
                raise MalformedLog(line_no, str(exc) or type(exc).__name__) from exc
    return records


def write_log(path: str | Path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


@dataclass
class EvalReport:
    n_queries_total: int
    n_queries_scored: int
    ndcg_at_k: dict[int, float]
    precision_at_k: dict[int, float]
    per_model: dict[str, "EvalReport"] = field(default_factory=dict)
    relative_delta: dict[str, dict[int, float | None]] = field(default_factory=dict)
    absolute_delta: dict[str, dict[int, float]] = field(default_factory=dict)
    baseline: str | None = None
    candidate: str | None = None

    def to_dict(self) -> dict:
        out = {
            "n_queries_total": self.n_queries_total,
            "n_queries_scored": self.n_queries_scored,
            "ndcg": {str(k): v for k, v in self.ndcg_at_k.items()},
            "precision": {str(k): v for k, v in self.precision_at_k.items()},
        }
        if self.per_model:
            out["baseline"] = self.baseline
            out["candidate"] = self.candidate
            out["models"] = {label: rep.to_dict() for label, rep in self.per_model.items()}
            out["relative_delta"] = {
                metric: {str(k): v for k, v in by_k.items()} for metric, by_k in self.relative_delta.items()
            }
            out["absolute_delta"] = {
                metric: {str(k): v for k, v in by_k.items()} for metric, by_k in self.absolute_delta.items()
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def evaluate_relevances(rankings: Iterable[Sequence[int]], ks: Sequence[int]) -> EvalReport:
    """Mean metrics over per-query binary relevance lists (empty lists allowed)."""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    ndcg_terms: dict[int, list[float]] = {k: [] for k in ks}
    prec_terms: dict[int, list[float]] = {k: [] for k in ks}
    total = scored = 0
    for rels in rankings:
        rels = list(rels)
        total += 1
        for k in ks:
            prec_terms[k].append(precision_at_k(rels, k))
        if any(rels):
            scored += 1
            for k in ks:
                ndcg_terms[k].append(ndcg_at_k(rels, k))
    # fsum: exact summation, so the mean is independent of record order/partitioning
    ndcg = {k: (math.fsum(v) / scored if scored else 0.0) for k, v in ndcg_terms.items()}
    prec = {k: (math.fsum(v) / total if total else 0.0) for k, v in prec_terms.items()}
    return EvalReport(total, scored, ndcg, prec)


def evaluate_records(records: Iterable[InteractionRecord], ks: Sequence[int]) -> EvalReport:
    return evaluate_relevances((r.relevances for r in records), ks)


def evaluate_log(log_file: str | Path, ks: Sequence[int]) -> EvalReport:
    return evaluate_records(read_log(log_file), ks)


def same_leaf_tap(query: Item, candidate: Item) -> bool:
    return candidate.category.levels == query.category.levels


def _relative(a: float, b: float) -> float | None:
    if a == b:
        return 0.0
    if a == 0:
        return None
    return (b - a) / a


def compare_reports(a: EvalReport, b: EvalReport, labels: tuple[str, str] = ("a", "b")) -> EvalReport:
    """Paired report: top-level metrics are the candidate's (``b``)."""
    rel = {
        "ndcg": {k: _relative(a.ndcg_at_k[k], b.ndcg_at_k[k]) for k in a.ndcg_at_k},
        "precision": {k: _relative(a.precision_at_k[k], b.precision_at_k[k]) for k in a.precision_at_k},
    }
    absd = {
        "ndcg": {k: b.ndcg_at_k[k] - a.ndcg_at_k[k] for k in a.ndcg_at_k},
        "precision": {k: b.precision_at_k[k] - a.precision_at_k[k] for k in a.precision_at_k},
    }
    return EvalReport(
        n_queries_total=b.n_queries_total,
        n_queries_scored=b.n_queries_scored,
        ndcg_at_k=dict(b.ndcg_at_k),
        precision_at_k=dict(b.precision_at_k),
        per_model={labels[0]: a, labels[1]: b},
        relative_delta=rel,
        absolute_delta=absd,
        baseline=labels[0],
        candidate=labels[1],
    )


def _as_mapping(embeddings) -> dict[ItemId, np.ndarray]:
    if isinstance(embeddings, dict):
        return {parse_item_id(k): np.asarray(v, dtype=np.float32) for k, v in embeddings.items()}
    ids, vectors = embeddings
    return {parse_item_id(i): np.asarray(v, dtype=np.float32) for i, v in zip(np.asarray(ids).tolist(), vectors)}


def build_index(embeddings: dict[ItemId, np.ndarray], ann_params: AnnParams | None = None) -> HnswIndex:
    ids = sorted(embeddings)
    matrix = normalize_rows(np.stack([embeddings[i] for i in ids]))
    index = HnswIndex(matrix.shape[1], ann_params)
    for i, v in zip(ids, matrix):
        index.insert(i, v)
    return index


def replay_records(
    catalog: CatalogStore,
    index: HnswIndex,
    params: RecoParams,
    tap_model: Callable[[Item, Item], bool] = same_leaf_tap,
    queries: Sequence[ItemId] | None = None,
) -> list[list[int]]:
    """Run the pipeline for every query and synthesize relevance lists with ``tap_model``."""
    reco = Recommender(index, catalog, params)
    rankings = []
    for qid in (queries if queries is not None else index.ids()):
        query = catalog[qid]
        result = reco.recommend(qid)
        rankings.append([1 if tap_model(query, catalog[r.item_id]) else 0 for r in result.results])
    return rankings


def replay_compare(
    catalog,
    embeddings_a,
    embeddings_b,
    ks: Sequence[int] = (1, 3, 5),
    tap_model: Callable[[Item, Item], bool] = same_leaf_tap,
    params: RecoParams | None = None,
    ann_params: AnnParams | None = None,
    labels: tuple[str, str] = ("a", "b"),
    queries: Sequence[ItemId] | None = None,
) -> EvalReport:
    """Replay the pipeline with two embedding sets over one catalog.

    ``embeddings_a`` is the baseline; deltas are ``(b - a) / a``. The
    category re-rank is off by default: under the same-leaf tap model it
    would float every relevant candidate to the top for both sets alike.
    """
    if not isinstance(catalog, CatalogStore):
        catalog = CatalogStore(catalog)
    params = params or RecoParams(include_query_category_tiers=False)
    emb_a, emb_b = _as_mapping(embeddings_a), _as_mapping(embeddings_b)
    for label, emb in zip(labels, (emb_a, emb_b)):
        missing = [i for i in emb if i not in catalog]
        if missing:
            raise AlignmentError(f"embeddings {label}: {len(missing)} ids not in catalog, e.g. {missing[0]}")
    if set(emb_a) != set(emb_b):
        raise AlignmentError("embedding sets cover different item ids")
    if queries is None:
        queries = sorted(emb_a)
    reports = []
    for emb in (emb_a, emb_b):
        index = build_index(emb, ann_params)
        reports.append(evaluate_relevances(replay_records(catalog, index, params, tap_model, queries), ks))
    return compare_reports(reports[0], reports[1], labels)
