"""Pure-Python HNSW kernels.

Reference implementation of the three hot routines. ``_hnsw_kernels.pyx``
implements the same signatures in Cython; ``kernels.py`` picks one at import.

Array conventions shared by both backends:

* ``vectors``: float32 ``(capacity, dim)``, rows are unit vectors
* ``ids``: uint64 ``(capacity,)``, external ItemId per slot (tie-breaker)
* ``deleted``: uint8 ``(capacity,)``, tombstone flags
* ``links``/``counts``: int32 ``(capacity, max_degree)`` / ``(capacity,)``
  for one layer; only the first ``counts[i]`` entries of row ``i`` are valid
* ``visited``/``epoch``: scratch buffer used by the compiled backend; ignored here

Ordering everywhere is score descending, then ItemId ascending.
"""
from __future__ import annotations

import heapq

import numpy as np

BACKEND = "python"


def search_layer(q, entries, ef, vectors, ids, deleted, links, counts, visited, epoch, skip_deleted):
    """Best-first beam search on one layer.

    Returns ``(slots, scores)`` of at most ``ef`` nodes, best first. Tombstoned
    nodes are traversed but left out of the result when ``skip_deleted``.
    """
    q64 = np.asarray(q, dtype=np.float64)
    seen: set[int] = set()
    cand: list = []  # (-score, key, slot): best on top
    res: list = []  # (score, -key, slot): worst on top

    start = []
    for e in np.asarray(entries).tolist():
        if e not in seen:
            seen.add(e)
            start.append(e)
    if not start:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    start_scores = (vectors[start].astype(np.float64) @ q64).tolist()
    for e, s in zip(start, start_scores):
        key = int(ids[e])
        heapq.heappush(cand, (-s, key, e))
        if not (skip_deleted and deleted[e]):
            heapq.heappush(res, (s, -key, e))
            if len(res) > ef:
                heapq.heappop(res)

    while cand:
        neg_s, key, c = heapq.heappop(cand)
        if len(res) >= ef and (-neg_s, -key) < res[0][:2]:
            break
        row = links[c, : counts[c]].tolist()
        fresh = [n for n in row if n not in seen]
        if not fresh:
            continue
        seen.update(fresh)
        scores = (vectors[fresh].astype(np.float64) @ q64).tolist()
        for n, s in zip(fresh, scores):
            k = int(ids[n])
            if len(res) < ef or (s, -k) > res[0][:2]:
                heapq.heappush(cand, (-s, k, n))
                if not (skip_deleted and deleted[n]):
                    heapq.heappush(res, (s, -k, n))
                    if len(res) > ef:
                        heapq.heappop(res)

    res.sort(reverse=True)
    slots = np.fromiter((r[2] for r in res), dtype=np.int64, count=len(res))
    scores = np.fromiter((r[0] for r in res), dtype=np.float64, count=len(res))
    return slots, scores


def select_neighbors(cand_slots, cand_scores, m, vectors):
    """Diversity heuristic over candidates sorted best first.

    A candidate is kept only if it is at least as similar to the base node
    as to every neighbor already kept.
    """
    selected: list[int] = []
    for c, s in zip(np.asarray(cand_slots).tolist(), np.asarray(cand_scores).tolist()):
        if len(selected) >= m:
            break
        if selected:
            sims = vectors[selected].astype(np.float64) @ vectors[c].astype(np.float64)
            if np.any(sims > s):
                continue
        selected.append(c)
    return np.asarray(selected, dtype=np.int64)


def connect(new, selected, links, counts, vectors, ids):
    """Link ``new`` to ``selected`` and add the reverse edges, pruning full lists."""
    cap = links.shape[1]
    selected = np.asarray(selected, dtype=np.int64)
    n = len(selected)
    links[new, :n] = selected
    counts[new] = n
    for s in selected.tolist():
        cnt = int(counts[s])
        row = links[s, :cnt]
        if new in row:
            continue
        if cnt < cap:
            links[s, cnt] = new
            counts[s] = cnt + 1
            continue
        cands = np.append(row, new).astype(np.int64)
        sc = vectors[cands].astype(np.float64) @ vectors[s].astype(np.float64)
        order = sorted(range(len(cands)), key=lambda i: (-sc[i], int(ids[cands[i]])))
        kept = select_neighbors(cands[order], sc[order], cap, vectors)
        links[s, : len(kept)] = kept
        counts[s] = len(kept)
