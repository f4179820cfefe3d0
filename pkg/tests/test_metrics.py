import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrieval_kit.core import EvalConfig
from retrieval_kit.distkernel import DistanceStore, compute_distances
from retrieval_kit.errors import ValidationError
from retrieval_kit.metrics import (MetricsReport, RankedResult, acc_at_k, estimate_reranked_unconstrained,
                                   evaluate, ground_truth_map, mean_ap, reports_to_csv)

from conftest import clustered_sets, make_set, oracle_metrics


def _ranked(order):
    return RankedResult(0, order, np.arange(len(order), dtype=float))


def _list_with_hit_at(rank, length=20):
    """Ranked list over gallery ids 0..length-1 whose only relevant id (99) sits at ``rank``."""
    order = list(range(length))
    order[rank - 1] = 99
    return order


class TestAccAtK:
    def test_top1(self):
        assert acc_at_k([_ranked([5, 1, 2])], {0: {5}}, 1) == 1.0

    def test_three_queries(self):
        results = [RankedResult(i, _list_with_hit_at(r), np.arange(20.0))
                   for i, r in enumerate((2, 5, 11))]
        gt = {0: {99}, 1: {99}, 2: {99}}
        assert acc_at_k(results, gt, 10) == pytest.approx(2 / 3)

    def test_empty_ground_truth(self):
        with pytest.raises(ValidationError, match="no ground truth"):
            acc_at_k([_ranked([0, 1])], {0: set()}, 1)

    def test_k_exceeds_list(self):
        with pytest.raises(ValidationError, match="exceeds"):
            acc_at_k([_ranked([0, 1])], {0: {1}}, 3)

    def test_random_permutations_match_scan(self):
        rng = np.random.default_rng(3)
        results, gt = [], {}
        for q in range(200):
            order = rng.permutation(60)
            results.append(RankedResult(q, order, np.arange(60.0)))
            gt[q] = set(rng.choice(60, size=rng.integers(1, 4), replace=False).tolist())
        for k in (1, 5, 10, 20):
            expected = sum(1 for r in results if set(r.ranked_gallery[:k].tolist()) & gt[r.query_row])
            assert acc_at_k(results, gt, k) == expected / 200


class TestMeanAP:
    def test_rank1(self):
        assert mean_ap([_ranked([3, 0, 1])], {0: {3}}) == 1.0

    def test_rank2(self):
        assert mean_ap([_ranked([0, 3, 1])], {0: {3}}) == 0.5

    def test_ranks_1_and_3(self):
        assert mean_ap([_ranked([3, 0, 4, 1])], {0: {3, 4}}) == pytest.approx(5 / 6)

    def test_prefix_missing_relevant(self):
        with pytest.raises(ValidationError, match="relevant"):
            mean_ap([_ranked([0, 1])], {0: {1, 7}})


def _random_instance(rng, max_q=50, max_g=200):
    n_q = int(rng.integers(1, max_q + 1))
    n_g = int(rng.integers(5, max_g + 1))
    n_prod = int(rng.integers(2, 12))
    gp = rng.integers(0, n_prod, size=n_g)
    qp = rng.integers(0, n_prod, size=n_q)
    # coarse grid values produce ties that the tie-break rule must settle
    dist = (rng.integers(0, 30, size=(n_q, n_g)) / 7).astype(np.float32)
    return qp, gp, dist


def test_engine_matches_oracle_on_random_instances():
    rng = np.random.default_rng(11)
    ks = (1, 5, 10, 20)
    for _ in range(100):
        qp, gp, dist = _random_instance(rng)
        q = make_set(np.zeros((len(qp), 1)), qp.tolist(), domain="query")
        g = make_set(np.zeros((len(gp), 1)), gp.tolist(), domain="gallery")
        if not any(p in set(gp.tolist()) for p in qp.tolist()):
            continue
        rep = evaluate(q, g, DistanceStore(dist, "euclidean"), EvalConfig(k_values=ks))
        acc, m = oracle_metrics(dist.astype(np.float64), qp.tolist(), gp.tolist(), ks)
        assert rep.overall["mAP"] == pytest.approx(m, abs=1e-12)
        for k in ks:
            assert rep.overall[f"Acc@{k}"] == pytest.approx(acc[k], abs=1e-12)


def test_queries_without_match_are_skipped():
    q = make_set(np.zeros((3, 1)), ["a", "b", "zzz"], domain="query")
    g = make_set(np.zeros((2, 1)), ["a", "b"], domain="gallery")
    store = DistanceStore(np.array([[0, 1], [1, 0], [0, 0]], dtype=np.float32), "euclidean")
    rep = evaluate(q, g, store, EvalConfig(k_values=(1,)))
    assert rep.n_queries_total == 2 and rep.n_queries_skipped == 1
    assert rep.skipped["no_gallery_match"] == 1
    assert rep.overall["mAP"] == 1.0


def test_store_shape_checked():
    q = make_set(np.zeros((2, 1)), ["a", "b"], domain="query")
    g = make_set(np.zeros((2, 1)), ["a", "b"], domain="gallery")
    with pytest.raises(ValidationError, match="store shape"):
        evaluate(q, g, DistanceStore(np.zeros((2, 3), dtype=np.float32), "euclidean"))


class TestProtocols:
    def test_single_category_constrained_equals_unconstrained(self):
        q, g = clustered_sets(0, n_products=10, n_gallery=3, n_queries=2, spread=1.5)
        store = compute_distances(q, g)
        a = evaluate(q, g, store, EvalConfig(constrained="none"))
        b = evaluate(q, g, store, EvalConfig(constrained="by_category"))
        assert a.overall == b.overall
        assert a.per_category == b.per_category

    def test_constraint_removes_nearer_distractor(self):
        # each query's true match is in its category; a cross-category row is nearer
        q = make_set([[0.0], [10.0], [20.0], [30.0]], ["a", "b", "c", "d"],
                     ["x", "x", "y", "y"], "query")
        g = make_set([[1.0], [0.5], [11.0], [10.5], [21.0], [20.5], [31.0], [30.5]],
                     ["a", "zc", "b", "zd", "c", "za", "d", "zb"],
                     ["x", "y", "x", "y", "y", "x", "y", "x"], "gallery")
        store = compute_distances(q, g)
        uncon = evaluate(q, g, store, EvalConfig(k_values=(1,)))
        con = evaluate(q, g, store, EvalConfig(k_values=(1,), constrained="by_category"))
        assert con.overall["Acc@1"] == 1.0
        assert uncon.overall["Acc@1"] == 0.0

    def test_missing_category_skipped(self):
        q = make_set([[0.0], [1.0]], ["a", "b"], ["x", "nope"], "query")
        g = make_set([[0.0], [1.0]], ["a", "b"], ["x", "x"], "gallery")
        rep = evaluate(q, g, compute_distances(q, g), EvalConfig(k_values=(1,), constrained="by_category"))
        assert rep.skipped["category_absent"] == 1
        assert rep.n_queries_total == 1

    def test_orthogonal_categories_weighted_average_equals_unconstrained(self):
        # each category lives in its own coordinate block, offset far from the origin,
        # so cross-category rows never outrank in-category ones
        rng = np.random.default_rng(8)
        n_cat, per_cat, block = 11, 4, 3
        qs, gs, qp, gp, qc, gc = [], [], [], [], [], []
        for c in range(n_cat):
            sl = slice(c * block, (c + 1) * block)
            for p in range(per_cat):
                center = np.zeros(n_cat * block)
                center[sl] = 20.0 + rng.normal(size=block)
                for kind, count in (("q", int(rng.integers(1, 4))), ("g", 3)):
                    for _ in range(count):
                        row = center.copy()
                        row[sl] += 0.6 * rng.normal(size=block)
                        (qs if kind == "q" else gs).append(row)
                        (qp if kind == "q" else gp).append(f"{c}-{p}")
                        (qc if kind == "q" else gc).append(f"cat{c}")
        q, g = make_set(qs, qp, qc, "query"), make_set(gs, gp, gc, "gallery")
        store = compute_distances(q, g)
        uncon = evaluate(q, g, store, EvalConfig(k_values=(1, 5)))
        con = evaluate(q, g, store, EvalConfig(k_values=(1, 5), constrained="by_category"))
        assert uncon.overall["mAP"] < 1.0
        w = con.category_average(weighted=True)
        for m in uncon.overall:
            assert w[m] == pytest.approx(uncon.overall[m], abs=1e-12)

    def test_report_invariants(self):
        q, g = clustered_sets(4, n_products=12, n_gallery=3, spread=2.0, n_categories=3)
        rep = evaluate(q, g, compute_distances(q, g), EvalConfig(k_values=(1, 2, 5, 10)))
        accs = [rep.overall[f"Acc@{k}"] for k in (1, 2, 5, 10)]
        assert accs == sorted(accs)
        assert all(0 <= v <= 1 for v in rep.overall.values())
        assert sum(v["n_queries"] for v in rep.per_category.values()) == rep.n_queries_total
        d = rep.to_dict()
        assert set(d) >= {"average_over_categories", "weighted_average_over_categories"}
        assert MetricsReport.from_dict(d).to_dict() == d


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_constrained_never_worse(seed):
    rng = np.random.default_rng(seed)
    q, g = clustered_sets(seed, n_products=int(rng.integers(3, 9)), n_gallery=2, n_queries=1,
                          spread=float(rng.uniform(0.5, 3)), dim=6, n_categories=int(rng.integers(1, 4)))
    store = compute_distances(q, g)
    cfg = dict(k_values=(1, 3))
    uncon = evaluate(q, g, store, EvalConfig(**cfg))
    con = evaluate(q, g, store, EvalConfig(constrained="by_category", **cfg))
    for m in uncon.overall:
        assert con.overall[m] >= uncon.overall[m] - 1e-12


def test_map_one_iff_relevant_first():
    q = make_set(np.zeros((2, 1)), ["a", "b"], domain="query")
    g = make_set(np.zeros((4, 1)), ["a", "a", "b", "b"], domain="gallery")
    perfect = np.array([[0, 0.1, 1, 1], [1, 1, 0.2, 0.1]], dtype=np.float32)
    assert evaluate(q, g, DistanceStore(perfect, "euclidean")).overall["mAP"] == 1.0
    flawed = perfect.copy()
    flawed[1, 0] = 0.15
    assert evaluate(q, g, DistanceStore(flawed, "euclidean")).overall["mAP"] < 1.0


def test_weighted_average_single_category():
    rep = MetricsReport("unconstrained", {"mAP": 0.3},
                        {"only": {"n_queries": 7, "metrics": {"mAP": 0.3}}}, n_queries_total=7)
    assert rep.category_average(weighted=True) == {"mAP": 0.3}


def test_ground_truth_map():
    q = make_set(np.zeros((2, 1)), ["a", "b"], domain="query")
    g = make_set(np.zeros((3, 1)), ["b", "a", "b"], domain="gallery")
    assert ground_truth_map(q, g) == {0: {1}, 1: {0, 2}}


class TestEstimator:
    @staticmethod
    def _cats(values, counts):
        return {c: {"n_queries": n, "metrics": dict(v)} for c, v, n in zip("ab", values, counts)}

    def test_zero_penalty(self):
        plain = self._cats([{"mAP": 0.4}, {"mAP": 0.6}], [1, 1])
        rer = self._cats([{"mAP": 0.5}, {"mAP": 0.7}], [1, 1])
        est = estimate_reranked_unconstrained(rer, plain, {"mAP": 0.5})
        assert est.penalty["mAP"] == 0.0
        assert est.values["mAP"] == pytest.approx(0.6)
        assert est.estimated

    def test_hand_case(self):
        plain = self._cats([{"mAP": 0.44}, {"mAP": 0.44}], [1, 1])
        rer = self._cats([{"mAP": 0.50}, {"mAP": 0.50}], [1, 1])
        est = estimate_reranked_unconstrained(rer, plain, {"mAP": 0.40})
        assert est.penalty["mAP"] == 0.44 - 0.40
        assert est.values["mAP"] == 0.50 - (0.44 - 0.40)
        assert est.values["mAP"] == pytest.approx(0.46, abs=1e-12)
        unequal = estimate_reranked_unconstrained(self._cats([{"mAP": 0.50}] * 2, [3, 5]),
                                                  self._cats([{"mAP": 0.44}] * 2, [3, 5]),
                                                  {"mAP": 0.40})
        assert unequal.values["mAP"] == pytest.approx(0.46, abs=1e-12)

    def test_penalty_clamped_and_estimate_clipped(self):
        plain = self._cats([{"mAP": 0.3}, {"mAP": 0.3}], [1, 1])
        rer = self._cats([{"mAP": 1.0}, {"mAP": 1.0}], [1, 1])
        est = estimate_reranked_unconstrained(rer, plain, {"mAP": 0.5})
        assert est.penalty["mAP"] == 0.0 and est.values["mAP"] == 1.0

    def test_uses_query_count_weights(self):
        plain = self._cats([{"mAP": 0.2}, {"mAP": 0.8}], [1, 3])
        rer = self._cats([{"mAP": 0.4}, {"mAP": 0.8}], [1, 3])
        est = estimate_reranked_unconstrained(rer, plain, {"mAP": 0.5})
        assert est.weighted_plain["mAP"] == pytest.approx(0.65)
        assert est.values["mAP"] == pytest.approx(0.7 - 0.15)

    def test_mismatched_categories(self):
        with pytest.raises(ValidationError, match="category sets"):
            estimate_reranked_unconstrained({"a": {"n_queries": 1, "metrics": {"mAP": 1}}},
                                            {"b": {"n_queries": 1, "metrics": {"mAP": 1}}},
                                            {"mAP": 1})

    def test_missing_metric(self):
        cats = self._cats([{"mAP": 0.1}, {"mAP": 0.1}], [1, 1])
        with pytest.raises(ValidationError, match="Acc@1"):
            estimate_reranked_unconstrained(cats, cats, {"mAP": 0.1, "Acc@1": 0.2})


def test_csv_rows_cover_every_metric():
    q, g = clustered_sets(2, n_products=6, n_gallery=2, n_categories=2)
    rep = evaluate(q, g, compute_distances(q, g), EvalConfig(k_values=(1, 5)))
    text = reports_to_csv([rep])
    lines = text.strip().splitlines()
    assert lines[0] == "protocol,category,metric,value,n_queries,reranked,estimated"
    # 3 aggregate blocks + 2 categories, 3 metrics each
    assert len(lines) - 1 == 5 * 3
