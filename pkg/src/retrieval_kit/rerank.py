"""k-reciprocal encoding re-ranking.

The (Q+G) x (Q+G) distance structure is never materialized: rows are
assembled on demand from the three stores, neighbor encodings are kept
sparse, and the Jaccard distances are produced one query row at a time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .distkernel import STORE_DTYPE, DistanceStore, _write_spill
from .errors import ValidationError


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ValidationError(f"k1 and k2 must be >= 1, got k1={self.k1}, k2={self.k2}")
        if self.k2 > self.k1:
            raise ValidationError(f"k2={self.k2} must not exceed k1={self.k1}")
        if not 0.0 <= self.lambda_value <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lambda_value}")

    def check_size(self, n_total):
        if self.k1 >= n_total:
            raise ValidationError(f"k1={self.k1} must be below the number of points ({n_total})")


class CombinedDistances:
    """Row accessor over the block matrix ``[[qq, qg], [qg.T, gg]]``."""

    def __init__(self, store_qg, store_qq, store_gg):
        n_q, n_g = store_qg.shape
        if store_qq.shape != (n_q, n_q) or store_gg.shape != (n_g, n_g):
            raise ValidationError(
                f"inconsistent stores: qg {store_qg.shape}, qq {store_qq.shape}, gg {store_gg.shape}")
        self.qg, self.qq, self.gg = store_qg, store_qq, store_gg
        self.n_queries, self.n_gallery = n_q, n_g
        self.n = n_q + n_g

    def row(self, i):
        if i < self.n_queries:
            parts = (self.qq[i], self.qg[i])
        else:
            j = i - self.n_queries
            parts = (self.qg[:, j], self.gg[j])
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


class DenseDistances:
    """Row accessor over a full square matrix (tests and small problems)."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.n = self.matrix.shape[0]

    def row(self, i):
        return self.matrix[i]


def _accessor(dist):
    return DenseDistances(dist) if isinstance(dist, np.ndarray) else dist


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def initial_ranking(dist, depth, workers=1):
    """Per row, the ``depth`` nearest points (self included), ties by index."""
    dist = _accessor(dist)
    depth = min(depth, dist.n)
    rows = _map(lambda i: np.argsort(dist.row(i), kind="stable")[:depth], range(dist.n), workers)
    return np.stack(rows).astype(np.int64)


def _reciprocal(ranking, i, k):
    forward = ranking[i, :k + 1]
    keep = [c for c in forward if i in ranking[c, :k + 1]]
    return np.array(keep, dtype=np.int64)


def k_reciprocal_neighbors(dist, probe, k1, ranking=None, row=None):
    """Expanded k-reciprocal set of ``probe`` with ``exp(-d)`` affinity weights.

    Returns ``(indices, weights)`` with indices ascending. ``ranking`` must hold
    at least ``k1 + 1`` columns when given.
    """
    dist = _accessor(dist)
    if not 1 <= k1 < dist.n:
        raise ValidationError(f"k1={k1} out of range for {dist.n} points")
    if not 0 <= probe < dist.n:
        raise ValidationError(f"probe {probe} out of range")
    if ranking is None:
        ranking = initial_ranking(dist, k1 + 1)
    base = _reciprocal(ranking, probe, k1)
    if base.size == 0:
        # only possible with heavy exact ties pushing the probe out of its own list
        base = np.array([probe], dtype=np.int64)
    half = int(np.around(k1 / 2.0))
    expanded = [base]
    for c in base:
        cand = _reciprocal(ranking, c, half)
        if np.intersect1d(cand, base).size >= 2.0 / 3.0 * cand.size:
            expanded.append(cand)
    members = np.unique(np.concatenate(expanded))
    if row is None:
        row = dist.row(probe)
    return members, np.exp(-row[members])


def neighbor_encodings(dist, params, ranking, workers=1):
    """Sparse rows V[i] = normalized affinity weights over the expanded set of i."""
    dist = _accessor(dist)

    def encode(i):
        idx, w = k_reciprocal_neighbors(dist, i, params.k1, ranking)
        return idx, w / w.sum()

    enc = _map(encode, range(dist.n), workers)
    indptr = np.zeros(dist.n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(ix) for ix, _ in enc])
    indices = np.concatenate([ix for ix, _ in enc])
    data = np.concatenate([w for _, w in enc])
    return sparse.csr_matrix((data, indices, indptr), shape=(dist.n, dist.n))


def query_expand(V, ranking, k2):
    """Average each encoding with those of its ``k2`` nearest points."""
    if k2 == 1:
        return V
    n = V.shape[0]
    rows = np.repeat(np.arange(n), k2)
    cols = ranking[:, :k2].ravel()
    avg = sparse.csr_matrix((np.full(rows.size, 1.0 / k2), (rows, cols)), shape=(n, n))
    out = (avg @ V).tocsr()
    out.sort_indices()
    return out


def jaccard_row(V, V_csc, i, targets_start, row_sums):
    """Jaccard distance of encoding i against rows ``targets_start..n`` of V."""
    n = V.shape[0]
    overlap = np.zeros(n - targets_start)
    lo, hi = V.indptr[i], V.indptr[i + 1]
    for col, val in zip(V.indices[lo:hi], V.data[lo:hi]):
        c0, c1 = V_csc.indptr[col], V_csc.indptr[col + 1]
        rows = V_csc.indices[c0:c1]
        vals = V_csc.data[c0:c1]
        sel = rows >= targets_start
        overlap[rows[sel] - targets_start] += np.minimum(val, vals[sel])
    union = row_sums[i] + row_sums[targets_start:] - overlap
    return 1.0 - overlap / union


def rerank(store_qg, store_qq, store_gg, params=None, path=None, workers=1) -> DistanceStore:
    """Re-ranked Q x G distances ``lambda * d + (1 - lambda) * d_jaccard``.

    With ``path`` the result is spilled to disk; otherwise it is kept in memory.
    """
    params = params or RerankParams()
    comb = CombinedDistances(store_qg, store_qq, store_gg)
    params.check_size(comb.n)
    n_q = comb.n_queries
    lam = params.lambda_value

    ranking = initial_ranking(comb, params.k1 + 1, workers)
    V = neighbor_encodings(comb, params, ranking, workers)
    V = query_expand(V, ranking, params.k2)
    V_csc = V.tocsc()
    V_csc.sort_indices()
    row_sums = np.asarray(V.sum(axis=1)).ravel()

    def final_row(i):
        jac = jaccard_row(V, V_csc, i, n_q, row_sums)
        orig = np.asarray(store_qg[i], dtype=np.float64)
        return (lam * orig + (1.0 - lam) * jac).astype(STORE_DTYPE)

    def fill(out):
        for i, r in enumerate(_map(final_row, range(n_q), workers)):
            out[i] = r

    if path is None:
        out = np.empty(store_qg.shape, dtype=STORE_DTYPE)
        fill(out)
        return DistanceStore(out, store_qg.metric)
    return _write_spill(path, store_qg.shape, store_qg.metric, fill)


def _sub_store(store, rows, cols):
    return DistanceStore(np.asarray(store.data[np.ix_(rows, cols)]), store.metric)


def rerank_by_category(queries, gallery, store_qg, store_qq, store_gg, params=None,
                       workers=1) -> DistanceStore:
    """Re-rank each category's query/gallery block on its own.

    Entries outside a query's category keep their original distance. ``k1`` and
    ``k2`` are reduced for categories too small to support them.
    """
    params = params or RerankParams()
    out = store_qg.to_array()
    q_cats = np.array([r.category for r in queries.records], dtype=object)
    g_cats = np.array([r.category for r in gallery.records], dtype=object)
    for cat in sorted(set(q_cats) & set(g_cats)):
        qi = np.flatnonzero(q_cats == cat)
        gi = np.flatnonzero(g_cats == cat)
        n = qi.size + gi.size
        k1 = min(params.k1, n - 1)
        if k1 < 1:
            continue
        sub = RerankParams(k1, min(params.k2, k1), params.lambda_value)
        res = rerank(_sub_store(store_qg, qi, gi), _sub_store(store_qq, qi, qi),
                     _sub_store(store_gg, gi, gi), sub, workers=workers)
        out[np.ix_(qi, gi)] = res.data
    return DistanceStore(out, store_qg.metric)
