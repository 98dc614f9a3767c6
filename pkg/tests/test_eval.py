import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visrec.domain import CatalogStore
from visrec.encoder import EncoderConfig, SyntheticEncoder
from visrec.errors import AlignmentError, MalformedLog, UndefinedMetric
from visrec.evaluation import (
    InteractionRecord,
    compare_reports,
    evaluate_log,
    evaluate_records,
    evaluate_relevances,
    ndcg_at_k,
    precision_at_k,
    read_log,
    replay_compare,
    write_log,
)
from visrec.synth import generate_catalog

binary = st.lists(st.integers(0, 1), min_size=1, max_size=20)


def naive_ndcg(rels, k):
    dcg = 0.0
    for pos in range(1, min(k, len(rels)) + 1):
        dcg += rels[pos - 1] / math.log(pos + 1, 2)
    ideal_rels = sorted(rels, reverse=True)
    idcg = 0.0
    for pos in range(1, min(k, len(ideal_rels)) + 1):
        idcg += ideal_rels[pos - 1] / math.log(pos + 1, 2)
    return dcg / idcg


def naive_precision(rels, k):
    hits = 0
    for pos in range(k):
        if pos < len(rels) and rels[pos] == 1:
            hits += 1
    return hits / k


def random_log(n, seed):
    rng = random.Random(seed)
    out = []
    for q in range(n):
        shown = rng.sample(range(1000, 2000), rng.randint(1, 8))
        tapped = {i for i in shown if rng.random() < 0.3}
        out.append(InteractionRecord(q, tuple(shown), frozenset(tapped)))
    return out


def test_ndcg_examples():
    assert ndcg_at_k([1, 1, 1, 1, 1], 5) == 1.0
    assert ndcg_at_k([1, 0, 1, 0, 0], 5) == pytest.approx(0.91972, abs=1e-5)
    with pytest.raises(UndefinedMetric):
        ndcg_at_k([0, 0, 0], 3)
    with pytest.raises(ValueError):
        ndcg_at_k([], 3)
    with pytest.raises(ValueError):
        ndcg_at_k([1], 0)


def test_precision_examples():
    assert precision_at_k([1, 0, 0, 1], 1) == 1.0
    assert precision_at_k([1, 0, 1], 3) == pytest.approx(2 / 3, abs=1e-9)
    assert precision_at_k([1, 1], 5) == 0.4


def test_record_validation():
    with pytest.raises(ValueError):
        InteractionRecord(1, (), frozenset())
    with pytest.raises(ValueError):
        InteractionRecord(1, (2, 2), frozenset())
    with pytest.raises(ValueError):
        InteractionRecord(1, (2, 3), frozenset({4}))


def test_single_record_log(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text(json.dumps({"query_item_id": 1, "shown": [10, 11, 12], "tapped": [10, 12]}) + "\n")
    rep = evaluate_log(path, [1, 3])
    assert rep.precision_at_k[1] == 1.0
    assert rep.precision_at_k[3] == pytest.approx(0.6667, abs=1e-4)
    assert rep.ndcg_at_k[3] == pytest.approx(0.91972, abs=1e-5)
    d = rep.to_dict()
    assert set(d) == {"n_queries_total", "n_queries_scored", "ndcg", "precision"}
    assert d["ndcg"]["3"] == rep.ndcg_at_k[3]


def test_perfect_log():
    recs = [InteractionRecord(i, (1, 2, 3), frozenset({1, 2, 3})) for i in range(5)]
    rep = evaluate_records(recs, [1, 3, 5])
    assert all(v == 1.0 for v in rep.ndcg_at_k.values())
    # precision@5 divides by 5 with only 3 shown
    assert rep.precision_at_k[1] == rep.precision_at_k[3] == 1.0
    assert rep.precision_at_k[5] == pytest.approx(0.6)


def test_oracle_100_records(tmp_path):
    recs = random_log(100, seed=3)
    path = tmp_path / "log.jsonl"
    write_log(path, recs)
    rep = evaluate_log(path, [1, 3, 5])
    scored = [r for r in recs if r.tapped]
    assert rep.n_queries_total == 100 and rep.n_queries_scored == len(scored)
    for k in (1, 3, 5):
        rels = lambda r: [1 if s in r.tapped else 0 for s in r.shown]
        want_ndcg = sum(naive_ndcg(rels(r), k) for r in scored) / len(scored)
        want_prec = sum(naive_precision(rels(r), k) for r in recs) / len(recs)
        assert abs(rep.ndcg_at_k[k] - want_ndcg) <= 1e-9
        assert abs(rep.precision_at_k[k] - want_prec) <= 1e-9


def test_partition_independence():
    recs = random_log(300, seed=4)
    whole = evaluate_records(recs, [1, 3, 5])
    shuffled = recs[:]
    random.Random(0).shuffle(shuffled)
    again = evaluate_records(shuffled, [1, 3, 5])
    for k in (1, 3, 5):
        assert abs(whole.ndcg_at_k[k] - again.ndcg_at_k[k]) <= 1e-12
        assert abs(whole.precision_at_k[k] - again.precision_at_k[k]) <= 1e-12


def test_malformed_log(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"query_item_id": 1, "shown": [1], "tapped": []}\n\n{"query_item_id": 2, "shown": [3], "tapped": [4]}\n')
    with pytest.raises(MalformedLog) as info:
        read_log(path)
    assert info.value.line_no == 3
    path.write_text("[1,2]\n")
    with pytest.raises(MalformedLog):
        read_log(path)


@settings(max_examples=200, deadline=None)
@given(binary, st.integers(1, 25))
def test_metric_bounds_and_oracle(rels, k):
    p = precision_at_k(rels, k)
    assert 0.0 <= p <= 1.0 and p == naive_precision(rels, k)
    if any(rels):
        n = ndcg_at_k(rels, k)
        assert 0.0 <= n <= 1.0 + 1e-12
        assert n == pytest.approx(naive_ndcg(rels, k), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(binary.filter(any), st.integers(1, 20), st.randoms(use_true_random=False))
def test_equal_relevance_swaps(rels, k, rnd):
    ones = [i for i, r in enumerate(rels) if r]
    zeros = [i for i, r in enumerate(rels) if not r]
    perm = list(range(len(rels)))
    for group in (ones, zeros):
        shuffled = group[:]
        rnd.shuffle(shuffled)
        for a, b in zip(group, shuffled):
            perm[a] = b
    assert ndcg_at_k([rels[i] for i in perm], k) == ndcg_at_k(rels, k)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10))
def test_precision_monotone_when_relevant_first(n_rel, n_irr):
    rels = [1] * n_rel + [0] * n_irr
    values = [precision_at_k(rels, k) for k in range(1, n_rel + n_irr + 3)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_relabeling_invariance():
    recs = random_log(50, seed=5)
    relabeled = [InteractionRecord(r.query_item_id + 10**6, tuple(s * 7 + 3 for s in r.shown),
                                   frozenset(t * 7 + 3 for t in r.tapped)) for r in recs]
    a, b = evaluate_records(recs, [1, 3, 5]), evaluate_records(relabeled, [1, 3, 5])
    assert a.ndcg_at_k == b.ndcg_at_k and a.precision_at_k == b.precision_at_k


def test_compare_reports_deltas():
    a = evaluate_relevances([[1, 0, 0], [0, 1, 0]], [1, 3])
    b = evaluate_relevances([[1, 0, 0], [1, 0, 0]], [1, 3])
    rep = compare_reports(a, b, ("base", "cand"))
    assert rep.relative_delta["precision"][1] == pytest.approx(1.0)
    assert rep.absolute_delta["precision"][1] == pytest.approx(0.5)
    d = rep.to_dict()
    assert set(d["models"]) == {"base", "cand"} and d["relative_delta"]["precision"]["1"] == pytest.approx(1.0)
    zero = compare_reports(evaluate_relevances([[0]], [1]), evaluate_relevances([[1]], [1]))
    assert zero.relative_delta["precision"][1] is None


def embeddings_for(catalog, noise, dim=64, seed=0):
    enc = SyntheticEncoder(EncoderConfig(output_dim=dim, synthetic_seed=seed, synthetic_noise=noise))
    return {it.id: enc.encode(it).values for it in catalog}


def test_replay_identical_sets_zero_delta():
    catalog = generate_catalog(300, seed=6)
    emb = embeddings_for(catalog, 0.35)
    rep = replay_compare(catalog, emb, dict(emb))
    for metric in ("ndcg", "precision"):
        assert all(v == 0.0 for v in rep.relative_delta[metric].values())
    assert rep.n_queries_total == 300


def test_replay_good_beats_poor():
    catalog = generate_catalog(1000, roots=4, parents=5, leaves=5, seed=7)
    rep = replay_compare(catalog, embeddings_for(catalog, 1.5), embeddings_for(catalog, 0.35), labels=("poor", "good"))
    assert rep.relative_delta["ndcg"][5] > 0
    assert rep.relative_delta["precision"][1] > 0


def test_replay_single_query_and_alignment():
    catalog = generate_catalog(50, seed=8)
    emb = embeddings_for(catalog, 0.35)
    rep = replay_compare(catalog, emb, emb, queries=[catalog[0].id])
    assert rep.n_queries_total == 1
    with pytest.raises(AlignmentError):
        replay_compare(catalog, {**emb, 10**9: emb[catalog[0].id]}, emb)
    partial = dict(emb)
    partial.pop(catalog[1].id)
    with pytest.raises(AlignmentError):
        replay_compare(catalog, emb, partial)
    ids = np.array(sorted(emb), dtype=np.uint64)
    as_arrays = (ids, np.stack([emb[i] for i in ids.tolist()]))
    assert replay_compare(CatalogStore(catalog), as_arrays, emb).relative_delta["ndcg"][5] == 0.0
