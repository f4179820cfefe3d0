"""Retrieval metrics (Acc@k, mAP), evaluation protocols and report I/O."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import EvalConfig
from .errors import StorageError, ValidationError

REPORT_SCHEMA_VERSION = 1
PROTOCOLS = ("unconstrained", "constrained_by_category", "cross_domain")


@dataclass
class RankedResult:
    query_row: int
    ranked_gallery: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.ranked_gallery = np.asarray(self.ranked_gallery, dtype=np.int64)
        self.distances = np.asarray(self.distances)
        if self.ranked_gallery.shape != self.distances.shape:
            raise ValidationError("ranked_gallery and distances must align")


def acc_name(k):
    return f"Acc@{k}"


def metric_names(k_values):
    return ["mAP"] + [acc_name(k) for k in k_values]


# -- per-query primitives -------------------------------------------------

def _mean(values):
    # fixed left-to-right order (query index), unlike numpy's blocked reductions
    values = list(values)
    return sum(values) / len(values)


def _weighted_mean(values, weights):
    return sum(v * w for v, w in zip(values, weights)) / sum(weights)


def _hit_mask(ranked, relevant):
    rel = np.fromiter(relevant, dtype=np.int64, count=len(relevant))
    return np.isin(ranked, rel)


def first_hit_rank(hits) -> int:
    """1-based rank of the first relevant item, or 0 if none."""
    idx = np.flatnonzero(hits)
    return int(idx[0]) + 1 if idx.size else 0


def average_precision(hits, n_relevant) -> float:
    pos = np.flatnonzero(hits)
    if pos.size < n_relevant:
        raise ValidationError(
            f"ranked list holds {pos.size} of {n_relevant} relevant items; mAP needs all of them")
    precisions = np.arange(1, pos.size + 1) / (pos + 1.0)
    return sum(precisions.tolist()) / n_relevant


def _check_gt(results, ground_truth):
    for r in results:
        if not ground_truth.get(r.query_row):
            raise ValidationError(f"query {r.query_row} has no ground truth; filter it upstream")


def acc_at_k(results, ground_truth, k) -> float:
    """Fraction of queries with a relevant gallery row among the top ``k``."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not results:
        raise ValidationError("no queries to evaluate")
    _check_gt(results, ground_truth)
    hits = 0
    for r in results:
        if k > r.ranked_gallery.size:
            raise ValidationError(
                f"k={k} exceeds ranked list of length {r.ranked_gallery.size} for query {r.query_row}")
        rank = first_hit_rank(_hit_mask(r.ranked_gallery[:k], ground_truth[r.query_row]))
        hits += rank > 0
    return hits / len(results)


def mean_ap(results, ground_truth) -> float:
    if not results:
        raise ValidationError("no queries to evaluate")
    _check_gt(results, ground_truth)
    aps = [average_precision(_hit_mask(r.ranked_gallery, ground_truth[r.query_row]),
                             len(ground_truth[r.query_row])) for r in results]
    return _mean(aps)


# -- reports ---------------------------------------------------------------

@dataclass
class MetricsReport:
    protocol: str
    overall: dict
    per_category: dict = field(default_factory=dict)
    n_queries_total: int = 0
    n_queries_skipped: int = 0
    estimated: bool = False
    reranked: bool = False
    skipped: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"unknown protocol {self.protocol!r}")

    @property
    def metric_names(self):
        return list(self.overall)

    def category_average(self, weighted=False) -> dict:
        """Mean of the per-category values; ``weighted`` uses query counts."""
        cats = sorted(self.per_category)
        if not cats:
            return {}
        out = {}
        for m in self.metric_names:
            vals = [float(self.per_category[c]["metrics"][m]) for c in cats]
            if weighted:
                out[m] = _weighted_mean(vals, [self.per_category[c]["n_queries"] for c in cats])
            else:
                out[m] = _mean(vals)
        return out

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "estimated": self.estimated,
            "reranked": self.reranked,
            "n_queries_total": self.n_queries_total,
            "n_queries_skipped": self.n_queries_skipped,
            "skipped": dict(self.skipped),
            "overall": dict(self.overall),
            "average_over_categories": self.category_average(weighted=False),
            "weighted_average_over_categories": self.category_average(weighted=True),
            "per_category": {c: {"n_queries": v["n_queries"], "metrics": dict(v["metrics"])}
                             for c, v in sorted(self.per_category.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(protocol=d["protocol"], overall=dict(d["overall"]),
                   per_category={c: {"n_queries": int(v["n_queries"]), "metrics": dict(v["metrics"])}
                                 for c, v in d.get("per_category", {}).items()},
                   n_queries_total=int(d.get("n_queries_total", 0)),
                   n_queries_skipped=int(d.get("n_queries_skipped", 0)),
                   estimated=bool(d.get("estimated", False)),
                   reranked=bool(d.get("reranked", False)),
                   skipped=dict(d.get("skipped", {})))

    def csv_rows(self):
        """One row per (protocol, category, metric); aggregate rows use ``__``-prefixed names."""
        rows = []
        star = "*" if self.estimated else ""
        blocks = [("__overall__", self.n_queries_total, self.overall),
                  ("__average_over_categories__", self.n_queries_total, self.category_average()),
                  ("__weighted_average_over_categories__", self.n_queries_total,
                   self.category_average(weighted=True))]
        blocks += [(c, v["n_queries"], v["metrics"]) for c, v in sorted(self.per_category.items())]
        for cat, n, vals in blocks:
            for m, v in vals.items():
                rows.append({"protocol": self.protocol, "category": cat, "metric": m,
                             "value": repr(float(v)), "n_queries": n,
                             "reranked": int(self.reranked), "estimated": star})
        return rows


CSV_FIELDS = ["protocol", "category", "metric", "value", "n_queries", "reranked", "estimated"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerows(rep.csv_rows())
    return buf.getvalue()


def write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


# -- protocols -------------------------------------------------------------

def _query_candidates(queries, gallery, constrained):
    """Yield ``(query index, candidate gallery rows, relevant rows, skip reason)``."""
    g_products = np.array([r.product for r in gallery.records], dtype=object)
    g_categories = np.array([r.category for r in gallery.records], dtype=object)
    all_rows = np.arange(len(gallery.records), dtype=np.int64)
    by_category = {c: np.flatnonzero(g_categories == c) for c in sorted(set(g_categories))}
    for qi, rec in enumerate(queries.records):
        if constrained:
            cand = by_category.get(rec.category)
            if cand is None or cand.size == 0:
                yield qi, None, None, "category_absent"
                continue
        else:
            cand = all_rows
        relevant = cand[g_products[cand] == rec.product]
        if relevant.size == 0:
            yield qi, cand, None, "no_gallery_match"
            continue
        yield qi, cand, relevant, None


def _score_query(dist_row, cand, relevant, k_values):
    order = np.argsort(dist_row[cand], kind="stable")
    ranked = cand[order]
    hits = np.isin(ranked, relevant)
    first = first_hit_rank(hits)
    vals = {"mAP": average_precision(hits, relevant.size)}
    for k in k_values:
        vals[acc_name(k)] = 1.0 if 0 < first <= min(k, ranked.size) else 0.0
    return vals


def _assemble(protocol, per_query, k_values, skipped, reranked=False):
    names = metric_names(k_values)
    if not per_query:
        raise ValidationError("every query was skipped; nothing to evaluate")
    overall = {m: _mean(v[m] for _, v in per_query) for m in names}
    per_category = {}
    for cat in sorted({c for c, _ in per_query}):
        rows = [v for c, v in per_query if c == cat]
        per_category[cat] = {"n_queries": len(rows),
                             "metrics": {m: _mean(v[m] for v in rows) for m in names}}
    return MetricsReport(protocol=protocol, overall=overall, per_category=per_category,
                         n_queries_total=len(per_query),
                         n_queries_skipped=sum(skipped.values()),
                         skipped=dict(skipped), reranked=reranked)


def evaluate(queries, gallery, store, config: Optional[EvalConfig] = None,
             protocol=None, rerank_stores=None, workers=1) -> MetricsReport:
    """Rank the gallery for every query and aggregate Acc@k / mAP.

    ``config.constrained == "by_category"`` restricts each query's candidates to
    gallery rows of its own category. When ``config.rerank`` is set,
    ``rerank_stores=(store_qq, store_gg)`` must be given; constrained runs are
    then re-ranked per category, unconstrained runs globally.
    """
    config = config or EvalConfig()
    if not queries.records or not gallery.records:
        raise ValidationError("queries and gallery need records attached")
    if store.shape != (len(queries.records), len(gallery.records)):
        raise ValidationError(
            f"store shape {store.shape} does not match {len(queries.records)} queries x "
            f"{len(gallery.records)} gallery rows")
    constrained = config.constrained == "by_category"
    if protocol is None:
        protocol = "constrained_by_category" if constrained else "unconstrained"

    reranked = config.rerank is not None
    if reranked:
        if rerank_stores is None:
            raise ValidationError("re-ranking needs query-query and gallery-gallery stores")
        from .rerank import rerank_by_category, rerank
        store_qq, store_gg = rerank_stores
        if constrained:
            store = rerank_by_category(queries, gallery, store, store_qq, store_gg, config.rerank,
                                       workers=workers)
        else:
            store = rerank(store, store_qq, store_gg, config.rerank, workers=workers)

    per_query = []
    skipped = {"category_absent": 0, "no_gallery_match": 0}
    for qi, cand, relevant, reason in _query_candidates(queries, gallery, constrained):
        if reason is not None:
            skipped[reason] += 1
            continue
        vals = _score_query(store.row(qi), cand, relevant, config.k_values)
        per_query.append((queries.records[qi].category, vals))
    return _assemble(protocol, per_query, config.k_values, skipped, reranked=reranked)


def ground_truth_map(queries, gallery) -> dict:
    """Query index -> set of gallery indices showing the same product."""
    by_product = {}
    for gi, r in enumerate(gallery.records):
        by_product.setdefault(r.product, set()).add(gi)
    return {qi: set(by_product.get(r.product, ())) for qi, r in enumerate(queries.records)}


# -- penalty-term estimate -------------------------------------------------

@dataclass
class Estimate:
    values: dict
    penalty: dict
    weighted_plain: dict
    weighted_reranked: dict
    estimated: bool = True

    def to_dict(self):
        return {"estimated": self.estimated, "star": "*", "values": dict(self.values),
                "penalty": dict(self.penalty), "weighted_plain": dict(self.weighted_plain),
                "weighted_reranked": dict(self.weighted_reranked)}


def _weighted(per_category, weights, metric):
    cats = sorted(per_category)
    return _weighted_mean([float(per_category[c]["metrics"][metric]) for c in cats],
                          [weights[c] for c in cats])


def estimate_reranked_unconstrained(per_category_reranked, per_category_plain,
                                    unconstrained_plain) -> Estimate:
    """Estimate re-ranked unconstrained metrics from per-category runs.

    For each metric: ``penalty = max(0, weighted_plain - unconstrained_plain)``
    and ``estimate = clip(weighted_reranked - penalty, 0, 1)``, weights being
    per-category query counts of the plain run.
    """
    if isinstance(per_category_reranked, MetricsReport):
        per_category_reranked = per_category_reranked.per_category
    if isinstance(per_category_plain, MetricsReport):
        per_category_plain = per_category_plain.per_category
    if isinstance(unconstrained_plain, MetricsReport):
        unconstrained_plain = unconstrained_plain.overall
    if set(per_category_reranked) != set(per_category_plain) or not per_category_plain:
        raise ValidationError(
            f"category sets differ: {sorted(per_category_reranked)} vs {sorted(per_category_plain)}")
    weights = {c: v["n_queries"] for c, v in per_category_plain.items()}
    values, penalty, wp, wr = {}, {}, {}, {}
    for m in unconstrained_plain:
        for c in per_category_plain:
            for name, src in (("plain", per_category_plain), ("re-ranked", per_category_reranked)):
                if m not in src[c]["metrics"]:
                    raise ValidationError(f"metric {m!r} missing for category {c!r} ({name})")
        wp[m] = _weighted(per_category_plain, weights, m)
        wr[m] = _weighted(per_category_reranked, weights, m)
        penalty[m] = max(0.0, wp[m] - float(unconstrained_plain[m]))
        values[m] = min(1.0, max(0.0, wr[m] - penalty[m]))
    return Estimate(values, penalty, wp, wr)


# -- cross-domain ----------------------------------------------------------

def cross_domain_eval(model, test_queries, test_gallery, config: Optional[EvalConfig] = None,
                      tiles=None, workers=1) -> MetricsReport:
    """Embed raw query/gallery features from another dataset with ``model`` and evaluate."""
    from .distkernel import compute_distances
    from .toytrain import embed

    config = config or EvalConfig()
    if test_queries.dim != model.raw_dim or test_gallery.dim != model.raw_dim:
        raise ValidationError(
            f"model expects {model.raw_dim}-d features, got {test_queries.dim}/{test_gallery.dim}")
    q = embed(model, test_queries.matrix).with_records(test_queries.records)
    g = embed(model, test_gallery.matrix).with_records(test_gallery.records)
    store = compute_distances(q, g, config.distance_metric, tiles=tiles, workers=workers)
    stores = None
    if config.rerank is not None:
        stores = (compute_distances(q, q, config.distance_metric, tiles=tiles, workers=workers),
                  compute_distances(g, g, config.distance_metric, tiles=tiles, workers=workers))
    return evaluate(q, g, store, config, protocol="cross_domain", rerank_stores=stores,
                    workers=workers)
