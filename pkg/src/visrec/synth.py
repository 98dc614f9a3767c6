"""Deterministic synthetic catalogs for desk-scale runs."""
from __future__ import annotations

import math
from datetime import datetime, timedelta, timezone

import numpy as np

from .domain import CategoryPath, Item


def category_tree(roots: int, parents: int, leaves: int) -> list[CategoryPath]:
    """All leaf paths of a three-level ``root/parent/leaf`` taxonomy."""
    return [
        CategoryPath((f"r{a}", f"r{a}p{b}", f"r{a}p{b}l{c}"))
        for a in range(roots)
        for b in range(parents)
        for c in range(leaves)
    ]


def generate_catalog(
    n_items: int,
    roots: int = 5,
    parents: int = 4,
    leaves: int = 5,
    seed: int = 0,
    price_range: tuple[int, int] = (300, 30000),
    first_id: int = 1,
) -> list[Item]:
    """Items spread round-robin over the taxonomy with log-uniform prices."""
    rng = np.random.default_rng(seed)
    cats = category_tree(roots, parents, leaves)
    lo, hi = price_range
    log_prices = rng.uniform(math.log(lo), math.log(hi), size=n_items)
    base_time = datetime(2024, 7, 1, tzinfo=timezone.utc)
    items = []
    for i in range(n_items):
        item_id = first_id + i
        items.append(Item(
            id=item_id,
            title=f"item {item_id}",
            price=max(1, int(round(math.exp(log_prices[i])))),
            category=cats[i % len(cats)],
            image_ref=f"synthetic://{item_id}.jpg",
            created_at=base_time + timedelta(minutes=i),
        ))
    return items
