"""Real-time pipeline: ANN retrieval, price filtering, category re-ranking."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .ann import HnswIndex, Neighbor
from .domain import CategoryPath, Item, ItemId
from .errors import UnknownItem

EMPTY_AFTER_FILTERING = "empty_after_filtering"

TIER_SAME_LEAF = 0
TIER_SAME_PARENT = 1
TIER_OTHER = 2


@dataclass(frozen=True)
class RecoParams:
    k_final: int = 24
    k_retrieve: int = 200
    price_ratio: float = 3.0
    include_query_category_tiers: bool = True
    ef: int | None = None

    def __post_init__(self):
        if self.k_final < 1:
            raise ValueError("k_final must be >= 1")
        if self.k_retrieve < self.k_final:
            raise ValueError("k_retrieve must be >= k_final")
        if not (self.price_ratio > 1) or not math.isfinite(self.price_ratio):
            raise ValueError("price_ratio must be a finite number > 1")
        if self.ef is not None and self.ef < 1:
            raise ValueError("ef must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Recommendation:
    item_id: ItemId
    score: float
    tier: int
    rank: int

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "score": self.score, "tier": self.tier, "rank": self.rank}


@dataclass
class RecoResult:
    """Recommendations for one query; ``reason`` explains an empty list."""

    query_item_id: ItemId
    results: list[Recommendation] = field(default_factory=list)
    reason: str | None = None
    params: RecoParams | None = None

    def __iter__(self):
        return iter(self.results)

    def __len__(self):
        return len(self.results)

    def __getitem__(self, i):
        return self.results[i]

    @property
    def ids(self) -> list[ItemId]:
        return [r.item_id for r in self.results]


def price_band(price: int, ratio: float) -> tuple[int, int]:
    """Inclusive integer band ``[ceil(price / r), floor(price * r)]``, computed exactly."""
    r = Fraction(ratio)
    return math.ceil(Fraction(price) / r), math.floor(Fraction(price) * r)


def filter_by_price(candidates: list[Neighbor], query: Item, ratio: float, catalog) -> list[Neighbor]:
    lo, hi = price_band(query.price, ratio)
    kept = []
    for nb in candidates:
        item = catalog.get(nb.id)
        if item is not None and lo <= item.price <= hi:
            kept.append(nb)
    return kept


def category_tier(query: CategoryPath, candidate: CategoryPath) -> int:
    if candidate.levels == query.levels:
        return TIER_SAME_LEAF
    if query.parent and candidate.parent == query.parent:
        return TIER_SAME_PARENT
    return TIER_OTHER


def rerank_by_category(candidates: list[Neighbor], query: Item, catalog, by_tier: bool = True) -> list[Recommendation]:
    """Order by (tier, score desc, id asc) and assign 1-based ranks.

    With ``by_tier=False`` tiers are still reported but ordering is by score only.
    """
    rows = []
    for nb in candidates:
        item = catalog.get(nb.id)
        if item is None:
            continue
        rows.append((category_tier(query.category, item.category), nb.score, nb.id))
    if by_tier:
        rows.sort(key=lambda r: (r[0], -r[1], r[2]))
    else:
        rows.sort(key=lambda r: (-r[1], r[2]))
    return [Recommendation(item_id=i, score=s, tier=t, rank=n) for n, (t, s, i) in enumerate(rows, start=1)]


class Recommender:
    """Serves recommendations from a shared index and catalog (read-only)."""

    def __init__(self, index: HnswIndex, catalog, params: RecoParams | None = None):
        self.index = index
        self.catalog = catalog
        self.params = params or RecoParams()

    def recommend(self, query_id: ItemId, params: RecoParams | None = None) -> RecoResult:
        params = params or self.params
        query = self.catalog.get(query_id)
        if query is None or query_id not in self.index:
            raise UnknownItem(query_id)
        try:
            q = self.index.get_vector(query_id)
        except KeyError as exc:
            # delisted between the membership check and the read
            raise UnknownItem(query_id) from exc
        neighbors = self.index.search(q, params.k_retrieve, ef=params.ef)
        return self.finish(query, neighbors, params)

    def finish(self, query: Item, neighbors: list[Neighbor], params: RecoParams) -> RecoResult:
        """Everything after retrieval; shared with the exact-scan oracle path."""
        candidates = [nb for nb in neighbors if nb.id != query.id]
        candidates = filter_by_price(candidates, query, params.price_ratio, self.catalog)
        ranked = rerank_by_category(candidates, query, self.catalog, params.include_query_category_tiers)
        ranked = ranked[: params.k_final]
        reason = None if ranked else EMPTY_AFTER_FILTERING
        return RecoResult(query.id, ranked, reason, params)

    def recommend_exact(self, query_id: ItemId, params: RecoParams | None = None) -> RecoResult:
        """Same pipeline over an exact full scan instead of the ANN search."""
        params = params or self.params
        query = self.catalog.get(query_id)
        if query is None or query_id not in self.index:
            raise UnknownItem(query_id)
        q = self.index.get_vector(query_id)
        return self.finish(query, self.index.exact_search(q, params.k_retrieve), params)
