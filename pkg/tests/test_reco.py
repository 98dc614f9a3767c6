import random
from dataclasses import replace
from fractions import Fraction

import pytest

from visrec.ann import AnnParams, HnswIndex, Neighbor
from visrec.domain import CatalogStore, Item
from visrec.encoder import EncoderConfig, SyntheticEncoder
from visrec.errors import UnknownItem
from visrec.reco import (
    EMPTY_AFTER_FILTERING,
    RecoParams,
    Recommender,
    category_tier,
    filter_by_price,
    price_band,
    rerank_by_category,
)
from visrec.synth import generate_catalog


def in_band(query_price, price, ratio):
    r = Fraction(ratio)
    return Fraction(query_price) / r <= price <= Fraction(query_price) * r


def oracle_tier(q, c):
    if q.levels == c.levels:
        return 0
    if len(q.levels) > 1 and q.levels[:-1] == c.levels[:-1]:
        return 1
    return 2


def oracle_pipeline(catalog, neighbors, query, params):
    kept = [nb for nb in neighbors if nb.id != query.id and nb.id in catalog
            and in_band(query.price, catalog[nb.id].price, params.price_ratio)]
    keyed = [(oracle_tier(query.category, catalog[nb.id].category) if params.include_query_category_tiers else 0,
              -nb.score, nb.id) for nb in kept]
    keyed.sort()
    return [i for _, _, i in keyed[: params.k_final]]


def check_invariants(result, query, catalog, params):
    assert len(result.results) <= params.k_final
    assert [r.rank for r in result.results] == list(range(1, len(result.results) + 1))
    for r in result.results:
        assert r.item_id != query.id
        assert in_band(query.price, catalog[r.item_id].price, params.price_ratio)
        assert r.tier == oracle_tier(query.category, catalog[r.item_id].category)
        assert -1.0 <= r.score <= 1.0
    keys = [(r.tier, -r.score, r.item_id) for r in result.results]
    assert keys == sorted(keys)
    assert (result.reason == EMPTY_AFTER_FILTERING) == (not result.results)


def mk(i, price, levels=("a", "b", "c")):
    return Item(i, "", price, levels, "")


def test_params_validation():
    for kwargs in ({"k_final": 0}, {"k_final": 5, "k_retrieve": 4}, {"price_ratio": 1.0},
                   {"price_ratio": float("inf")}, {"ef": 0}):
        with pytest.raises(ValueError):
            RecoParams(**kwargs)


def test_price_band_boundaries():
    assert price_band(1000, 3.0) == (334, 3000)
    cat = CatalogStore([mk(1, 1000), mk(2, 2999), mk(3, 3001), mk(4, 334), mk(5, 333), mk(6, 3000)])
    cands = [Neighbor(i, 0.5) for i in (2, 3, 4, 5, 6, 77)]
    assert [nb.id for nb in filter_by_price(cands, cat[1], 3.0, cat)] == [2, 4, 6]
    assert [nb.id for nb in filter_by_price(cands[:5], cat[1], 1e9, cat)] == [2, 3, 4, 5, 6]


def test_price_band_exact_for_inexact_ratio():
    # 1.1 is inexact in binary; the band must still use its exact value
    lo, hi = price_band(10, 1.1)
    r = Fraction(1.1)
    assert lo == -(-Fraction(10) // r) and hi == Fraction(10) * r // 1


def test_filter_matches_predicate_oracle():
    rng = random.Random(1)
    items = [mk(i, rng.randint(1, 100000)) for i in range(1, 301)]
    cat = CatalogStore(items)
    for _ in range(50):
        q = rng.choice(items)
        ratio = rng.choice([1.5, 2.0, 3.0, 7.25])
        cands = [Neighbor(i, rng.random()) for i in rng.sample(range(1, 320), 60)]
        got = filter_by_price(cands, q, ratio, cat)
        assert got == [nb for nb in cands if nb.id in cat and in_band(q.price, cat[nb.id].price, ratio)]


def test_tiers():
    q = ("home", "kitchen", "mugs")
    assert category_tier(mk(0, 1, q).category, mk(0, 1, q).category) == 0
    assert category_tier(mk(0, 1, q).category, mk(0, 1, ("home", "kitchen", "cups")).category) == 1
    assert category_tier(mk(0, 1, q).category, mk(0, 1, ("home", "bath", "mugs")).category) == 2
    assert category_tier(mk(0, 1, ("toys",)).category, mk(0, 1, ("games",)).category) == 2


def test_rerank_rules():
    query = mk(1, 100, ("a", "b", "c"))
    cat = CatalogStore([query, mk(2, 100, ("x", "y", "z")), mk(3, 100, ("a", "b", "c")), mk(4, 100, ("a", "b", "d"))])
    out = rerank_by_category([Neighbor(2, 0.5), Neighbor(3, 0.5), Neighbor(4, 0.5)], query, cat)
    assert [r.tier for r in out] == [0, 1, 2] and [r.rank for r in out] == [1, 2, 3]
    cat2 = CatalogStore([query] + [mk(i, 100) for i in range(2, 7)])
    cands = [Neighbor(i, s) for i, s in zip(range(2, 7), (0.9, 0.8, 0.8, 0.3, 0.1))]
    assert [r.item_id for r in rerank_by_category(cands, query, cat2)] == [2, 3, 4, 5, 6]


def test_rerank_matches_sort_oracle():
    rng = random.Random(2)
    levels = [("a", "b", "c"), ("a", "b", "d"), ("a", "e", "c"), ("f", "g", "h")]
    items = [mk(i, 100, rng.choice(levels)) for i in range(1, 201)]
    cat = CatalogStore(items)
    for _ in range(30):
        q = rng.choice(items)
        cands = [Neighbor(i, round(rng.random(), 2)) for i in rng.sample(range(1, 201), 50)]
        got = [(r.tier, r.score, r.item_id) for r in rerank_by_category(cands, q, cat)]
        want = sorted(((oracle_tier(q.category, cat[nb.id].category), nb.score, nb.id) for nb in cands),
                      key=lambda t: (t[0], -t[1], t[2]))
        assert got == want


def tiny_world():
    enc = SyntheticEncoder(EncoderConfig(output_dim=16))
    items = [mk(1, 1000, ("a", "b", "c")), mk(2, 1200, ("a", "b", "c")), mk(3, 900, ("a", "b", "d")),
             mk(4, 50, ("a", "b", "c")), mk(5, 1100, ("x", "y", "z"))]
    index = HnswIndex(16, AnnParams(M=4, ef_construction=8))
    for it in items:
        index.insert(it.id, enc.encode(it).values)
    return CatalogStore(items), index


def test_single_same_leaf_candidate_is_first():
    cat, index = tiny_world()
    res = Recommender(index, cat).recommend(1)
    assert res.results[0].item_id == 2 and res.results[0].tier == 0
    assert 4 not in res.ids and 1 not in res.ids


def test_empty_after_filtering_and_unknown():
    cat, index = tiny_world()
    res = Recommender(index, cat).recommend(4)
    assert res.results == [] and res.reason == EMPTY_AFTER_FILTERING
    with pytest.raises(UnknownItem):
        Recommender(index, cat).recommend(999)


def test_invariants_and_oracle(small_world):
    catalog, index = small_world
    params = RecoParams(k_final=10, k_retrieve=60)
    reco = Recommender(index, catalog, params)
    for qid in catalog.ids():
        res = reco.recommend(qid)
        check_invariants(res, catalog[qid], catalog, params)
        neighbors = index.search(index.get_vector(qid), params.k_retrieve)
        assert res.ids == oracle_pipeline(catalog, neighbors, catalog[qid], params)
        survivors = [nb for nb in neighbors if nb.id != qid and in_band(catalog[qid].price, catalog[nb.id].price, 3.0)]
        if len(survivors) >= params.k_final:
            assert len(res.results) == params.k_final


def test_score_only_ordering(small_world):
    catalog, index = small_world
    params = RecoParams(k_final=10, k_retrieve=60, include_query_category_tiers=False)
    reco = Recommender(index, catalog, params)
    for qid in catalog.ids()[:50]:
        res = reco.recommend(qid)
        scores = [(-r.score, r.item_id) for r in res.results]
        assert scores == sorted(scores)
        assert all(r.tier == oracle_tier(catalog[qid].category, catalog[r.item_id].category) for r in res.results)


def test_price_scale_invariance(small_world):
    catalog, index = small_world
    scaled = CatalogStore(replace(it, price=it.price * 7) for it in catalog)
    a, b = Recommender(index, catalog), Recommender(index, scaled)
    for qid in catalog.ids()[:150]:
        assert a.recommend(qid).results == b.recommend(qid).results


def test_ann_pipeline_matches_exact_pipeline():
    catalog = CatalogStore(generate_catalog(1000, seed=21))
    enc = SyntheticEncoder(EncoderConfig(output_dim=128, synthetic_seed=5))
    index = HnswIndex(128)
    for it in catalog:
        index.insert(it.id, enc.encode(it).values)
    params = RecoParams(k_final=5)
    reco = Recommender(index, catalog, params)
    same = sum(reco.recommend(q).ids == reco.recommend_exact(q).ids for q in catalog.ids())
    assert same / len(catalog) >= 0.95
