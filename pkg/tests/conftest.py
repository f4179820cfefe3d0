import math
import sys

import numpy as np
import pytest

from retrieval_kit.core import EmbeddingSet, ItemRecord


def make_set(matrix, products, categories=None, domain="query", normalized=False):
    categories = categories or ["c"] * len(products)
    recs = [ItemRecord(f"{domain[0]}{i}", str(p), str(c), domain, i)
            for i, (p, c) in enumerate(zip(products, categories))]
    return EmbeddingSet(np.asarray(matrix, dtype=np.float64), recs, normalized)


def clustered_sets(seed, n_products=50, n_gallery=10, n_queries=2, spread=1.0, dim=32,
                   n_categories=1):
    """Gaussian clusters, one per product; rows are L2-normalized."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_products, dim))
    q, g, qp, gp, qc, gc = [], [], [], [], [], []
    for p in range(n_products):
        cat = f"cat{p % n_categories}"
        for _ in range(n_gallery):
            g.append(centers[p] + spread * rng.normal(size=dim))
            gp.append(p)
            gc.append(cat)
        for _ in range(n_queries):
            q.append(centers[p] + spread * rng.normal(size=dim))
            qp.append(p)
            qc.append(cat)
    q = np.array(q)
    g = np.array(g)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return (make_set(q, qp, qc, "query", True), make_set(g, gp, gc, "gallery", True))


# -- independent oracles ------------------------------------------------------

def naive_distances(q, g, metric="euclidean"):
    out = np.zeros((len(q), len(g)))
    for i, a in enumerate(q):
        for j, b in enumerate(g):
            if metric == "euclidean":
                out[i, j] = math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))
            else:
                out[i, j] = max(0.0, 1.0 - sum(float(x) * float(y) for x, y in zip(a, b)))
    return out


def oracle_ranking(row, candidates=None):
    candidates = range(len(row)) if candidates is None else candidates
    return sorted(candidates, key=lambda j: (row[j], j))


def oracle_metrics(dist, q_products, g_products, ks):
    """Acc@k and mAP by explicit scanning of fully sorted lists."""
    acc = {k: 0 for k in ks}
    aps = []
    for i, row in enumerate(dist):
        ranked = oracle_ranking(row)
        relevant = {j for j, p in enumerate(g_products) if p == q_products[i]}
        if not relevant:
            continue
        for k in ks:
            if set(ranked[:k]) & relevant:
                acc[k] += 1
        found, total = 0, 0.0
        for pos, j in enumerate(ranked, start=1):
            if j in relevant:
                found += 1
                total += found / pos
        aps.append(total / len(relevant))
    n = len(aps)
    return {k: acc[k] / n for k in ks}, sum(aps) / n


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        status, title, detail = results[num]
        terminalreporter.write_line(f"{status}  criterion {num:>2}: {title} | {detail}")
