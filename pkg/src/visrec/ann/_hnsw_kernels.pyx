# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled HNSW kernels; same signatures and semantics as ``_hnsw_py``."""
import numpy as np

from libc.stdint cimport int32_t, int64_t, uint8_t, uint32_t, uint64_t
from libc.stdlib cimport free, malloc, realloc

BACKEND = "cython"

ctypedef struct Entry:
    double score
    uint64_t key
    int64_t slot


cdef inline bint better(const Entry* a, const Entry* b) noexcept nogil:
    return a.score > b.score or (a.score == b.score and a.key < b.key)


# Binary heap over Entry. best_on_top=1 pops the best entry first,
# best_on_top=0 pops the worst first.
ctypedef struct Heap:
    Entry* data
    Py_ssize_t size
    Py_ssize_t cap
    bint best_on_top


cdef inline bint prior(const Heap* h, const Entry* a, const Entry* b) noexcept nogil:
    if h.best_on_top:
        return better(a, b)
    return better(b, a)


cdef int heap_init(Heap* h, Py_ssize_t cap, bint best_on_top) except -1:
    h.data = <Entry*> malloc(cap * sizeof(Entry))
    if h.data == NULL:
        raise MemoryError()
    h.size = 0
    h.cap = cap
    h.best_on_top = best_on_top
    return 0


cdef int heap_push(Heap* h, Entry e) except -1:
    cdef Py_ssize_t i, parent
    cdef Entry* grown
    if h.size == h.cap:
        grown = <Entry*> realloc(h.data, 2 * h.cap * sizeof(Entry))
        if grown == NULL:
            raise MemoryError()
        h.data = grown
        h.cap *= 2
    i = h.size
    h.size += 1
    while i > 0:
        parent = (i - 1) >> 1
        if prior(h, &e, &h.data[parent]):
            h.data[i] = h.data[parent]
            i = parent
        else:
            break
    h.data[i] = e
    return 0


cdef Entry heap_pop(Heap* h) noexcept nogil:
    cdef Entry top = h.data[0]
    cdef Entry last
    cdef Py_ssize_t i = 0, child
    h.size -= 1
    if h.size > 0:
        last = h.data[h.size]
        while True:
            child = 2 * i + 1
            if child >= h.size:
                break
            if child + 1 < h.size and prior(h, &h.data[child + 1], &h.data[child]):
                child += 1
            if prior(h, &h.data[child], &last):
                h.data[i] = h.data[child]
                i = child
            else:
                break
        h.data[i] = last
    return top


cdef inline double dot_rows(const float* a, const float* b, Py_ssize_t dim) noexcept nogil:
    # four independent f64 accumulators; summation order is fixed, so results are reproducible
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t j = 0
    cdef Py_ssize_t end4 = dim - (dim % 4)
    while j < end4:
        s0 += <double> a[j] * <double> b[j]
        s1 += <double> a[j + 1] * <double> b[j + 1]
        s2 += <double> a[j + 2] * <double> b[j + 2]
        s3 += <double> a[j + 3] * <double> b[j + 3]
        j += 4
    while j < dim:
        s0 += <double> a[j] * <double> b[j]
        j += 1
    return (s0 + s1) + (s2 + s3)


def search_layer(const float[::1] q, const int64_t[::1] entries, Py_ssize_t ef,
                 const float[:, ::1] vectors, const uint64_t[::1] ids,
                 const uint8_t[::1] deleted, const int32_t[:, ::1] links,
                 const int32_t[::1] counts, uint32_t[::1] visited, uint32_t epoch,
                 bint skip_deleted):
    cdef Py_ssize_t dim = vectors.shape[1]
    cdef Py_ssize_t i, j, n_out
    cdef int64_t c, nb
    cdef Entry e, worst, top
    cdef Heap cand, res
    cdef const float* qp = &q[0]
    cdef int64_t[::1] os_view
    cdef double[::1] sc_view

    heap_init(&cand, max(ef, 16), 1)
    try:
        heap_init(&res, ef + 1, 0)
    except MemoryError:
        free(cand.data)
        raise
    try:
        for i in range(entries.shape[0]):
            c = entries[i]
            if visited[c] == epoch:
                continue
            visited[c] = epoch
            e.score = dot_rows(&vectors[c, 0], qp, dim)
            e.key = ids[c]
            e.slot = c
            heap_push(&cand, e)
            if not (skip_deleted and deleted[c]):
                heap_push(&res, e)
                if res.size > ef:
                    heap_pop(&res)

        while cand.size > 0:
            top = heap_pop(&cand)
            if res.size >= ef and better(&res.data[0], &top):
                break
            c = top.slot
            for j in range(counts[c]):
                nb = links[c, j]
                if visited[nb] == epoch:
                    continue
                visited[nb] = epoch
                e.score = dot_rows(&vectors[nb, 0], qp, dim)
                e.key = ids[nb]
                e.slot = nb
                if res.size < ef or better(&e, &res.data[0]):
                    heap_push(&cand, e)
                    if not (skip_deleted and deleted[nb]):
                        heap_push(&res, e)
                        if res.size > ef:
                            heap_pop(&res)

        n_out = res.size
        out_slots = np.empty(n_out, dtype=np.int64)
        out_scores = np.empty(n_out, dtype=np.float64)
        os_view = out_slots
        sc_view = out_scores
        for i in range(n_out - 1, -1, -1):
            worst = heap_pop(&res)
            os_view[i] = worst.slot
            sc_view[i] = worst.score
        return out_slots, out_scores
    finally:
        free(cand.data)
        free(res.data)


cdef Py_ssize_t _select(const int64_t* cands, const double* scores, Py_ssize_t n,
                        Py_ssize_t m, const float[:, ::1] vectors,
                        int64_t* out) noexcept nogil:
    cdef Py_ssize_t dim = vectors.shape[1]
    cdef Py_ssize_t i, j, n_sel = 0
    cdef bint good
    cdef int64_t c
    for i in range(n):
        if n_sel >= m:
            break
        c = cands[i]
        good = True
        for j in range(n_sel):
            if dot_rows(&vectors[c, 0], &vectors[out[j], 0], dim) > scores[i]:
                good = False
                break
        if good:
            out[n_sel] = c
            n_sel += 1
    return n_sel


def select_neighbors(const int64_t[::1] cand_slots, const double[::1] cand_scores,
                     Py_ssize_t m, const float[:, ::1] vectors):
    cdef Py_ssize_t n = cand_slots.shape[0]
    out = np.empty(min(n, m), dtype=np.int64)
    cdef int64_t[::1] ov = out
    if n == 0 or m == 0:
        return out[:0]
    cdef Py_ssize_t k = _select(&cand_slots[0], &cand_scores[0], n, m, vectors, &ov[0])
    return out[:k]


def connect(int64_t new, const int64_t[::1] selected, int32_t[:, ::1] links,
            int32_t[::1] counts, const float[:, ::1] vectors, const uint64_t[::1] ids):
    cdef Py_ssize_t cap = links.shape[1]
    cdef Py_ssize_t dim = vectors.shape[1]
    cdef Py_ssize_t n = selected.shape[0]
    cdef Py_ssize_t i, j, a, cnt, k
    cdef int64_t s, tmp_slot
    cdef double tmp_score
    cdef bint present
    cdef int64_t* cs = <int64_t*> malloc((cap + 1) * sizeof(int64_t))
    cdef double* sc = <double*> malloc((cap + 1) * sizeof(double))
    cdef int64_t* kept = <int64_t*> malloc((cap + 1) * sizeof(int64_t))
    if cs == NULL or sc == NULL or kept == NULL:
        free(cs); free(sc); free(kept)
        raise MemoryError()
    try:
        for i in range(n):
            links[new, i] = <int32_t> selected[i]
        counts[new] = <int32_t> n
        for i in range(n):
            s = selected[i]
            cnt = counts[s]
            present = False
            for j in range(cnt):
                if links[s, j] == new:
                    present = True
                    break
            if present:
                continue
            if cnt < cap:
                links[s, cnt] = <int32_t> new
                counts[s] = <int32_t> (cnt + 1)
                continue
            for j in range(cnt):
                cs[j] = links[s, j]
            cs[cnt] = new
            for j in range(cnt + 1):
                sc[j] = dot_rows(&vectors[cs[j], 0], &vectors[s, 0], dim)
            # insertion sort: score desc, id asc
            for j in range(1, cnt + 1):
                tmp_slot = cs[j]
                tmp_score = sc[j]
                a = j - 1
                while a >= 0 and (sc[a] < tmp_score or (sc[a] == tmp_score and ids[cs[a]] > ids[tmp_slot])):
                    cs[a + 1] = cs[a]
                    sc[a + 1] = sc[a]
                    a -= 1
                cs[a + 1] = tmp_slot
                sc[a + 1] = tmp_score
            k = _select(cs, sc, cnt + 1, cap, vectors, kept)
            for j in range(k):
                links[s, j] = <int32_t> kept[j]
            counts[s] = <int32_t> k
    finally:
        free(cs)
        free(sc)
        free(kept)
