import json
import math

import numpy as np
import pytest

from retrieval_kit.core import EmbeddingSet, l2_normalize
from retrieval_kit.distkernel import (DistanceStore, TileSpec, compute_distances, open_store,
                                      topk_per_query)
from retrieval_kit.errors import ValidationError

from conftest import naive_distances, oracle_ranking


def _unit(m):
    return l2_normalize(EmbeddingSet(np.asarray(m, dtype=np.float64)))


class TestGeometry:
    def test_identical_vectors(self):
        a = _unit([[0.6, 0.8]])
        assert compute_distances(a, a, "euclidean")[0, 0] == 0.0
        assert compute_distances(a, a, "cosine")[0, 0] == 0.0

    def test_orthogonal_vectors(self):
        a, b = _unit([[1.0, 0.0]]), _unit([[0.0, 1.0]])
        assert compute_distances(a, b, "euclidean")[0, 0] == pytest.approx(math.sqrt(2), abs=1e-6)
        assert compute_distances(a, b, "cosine")[0, 0] == pytest.approx(1.0, abs=1e-7)

    def test_cosine_requires_normalized(self):
        a = EmbeddingSet(np.ones((2, 3)))
        with pytest.raises(ValidationError, match="normalized"):
            compute_distances(a, a, "cosine")

    def test_dim_mismatch(self):
        with pytest.raises(ValidationError, match="dimension mismatch"):
            compute_distances(EmbeddingSet(np.ones((2, 3))), EmbeddingSet(np.ones((2, 4))))

    def test_cosine_clamped_non_negative(self, rng):
        a = _unit(rng.normal(size=(40, 5)))
        d = compute_distances(a, a, "cosine").data
        assert d.min() >= 0.0
        assert np.all(np.diag(d) <= 1e-6)


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_tiled_matches_naive_and_backings_agree(tmp_path, metric):
    rng = np.random.default_rng(37)
    q, g = _unit(rng.normal(size=(37, 7))), _unit(rng.normal(size=(53, 7)))
    tiles = TileSpec(8, 16)
    mem = compute_distances(q, g, metric, tiles)
    disk = compute_distances(q, g, metric, tiles, backing="disk", path=tmp_path / "d.dist")
    np.testing.assert_allclose(mem.data, naive_distances(q.matrix, g.matrix, metric), atol=1e-5)
    assert disk.backing == "disk_spilled"
    assert np.asarray(disk.data).tobytes() == mem.data.tobytes()


def test_tile_and_worker_independence(rng):
    q, g = EmbeddingSet(rng.normal(size=(50, 13))), EmbeddingSet(rng.normal(size=(70, 13)))
    ref = compute_distances(q, g, tiles=TileSpec(1024, 4096)).data.tobytes()
    for tiles in (TileSpec(1, 1), TileSpec(7, 9), TileSpec(50, 3), TileSpec(64, 128)):
        for workers in (1, 3):
            assert compute_distances(q, g, tiles=tiles, workers=workers).data.tobytes() == ref


def test_self_distance_and_symmetry(rng):
    x = EmbeddingSet(rng.normal(size=(30, 9)))
    d = compute_distances(x, x, tiles=TileSpec(4, 11)).data
    assert np.all(np.abs(np.diag(d)) <= 1e-6)
    np.testing.assert_allclose(d, d.T, atol=1e-6)


def test_spill_layout(tmp_path, rng):
    x = EmbeddingSet(rng.normal(size=(3, 4)))
    store = compute_distances(x, x, backing="disk", path=tmp_path / "s.dist")
    header = json.loads((tmp_path / "s.dist.json").read_text())
    assert header["n_queries"] == 3 and header["n_gallery"] == 3
    assert header["metric"] == "euclidean"
    raw = np.fromfile(tmp_path / "s.dist", dtype="<f4").reshape(3, 3)
    np.testing.assert_array_equal(raw, np.asarray(store.data))
    assert not (tmp_path / "s.dist.tmp").exists()
    reopened = open_store(tmp_path / "s.dist")
    assert isinstance(reopened.data, np.memmap)
    assert reopened.row(1).tolist() == raw[1].tolist()


def test_disk_backing_needs_path(rng):
    x = EmbeddingSet(rng.normal(size=(2, 2)))
    with pytest.raises(ValidationError):
        compute_distances(x, x, backing="disk")


def test_save_in_memory_store(tmp_path, rng):
    x = EmbeddingSet(rng.normal(size=(5, 3)))
    mem = compute_distances(x, x)
    saved = mem.save(tmp_path / "m.dist")
    assert np.asarray(saved.data).tobytes() == mem.data.tobytes()


class TestTopK:
    def test_simple_order(self):
        store = DistanceStore(np.array([[0.3, 0.1, 0.2]], dtype=np.float32), "euclidean")
        assert topk_per_query(store, 2)[0].ranked_gallery.tolist() == [1, 2]

    def test_ties_by_index(self):
        store = DistanceStore(np.full((1, 5), 0.7, dtype=np.float32), "euclidean")
        assert topk_per_query(store, 3)[0].ranked_gallery.tolist() == [0, 1, 2]

    def test_k_too_large(self):
        store = DistanceStore(np.zeros((1, 3), dtype=np.float32), "euclidean")
        with pytest.raises(ValidationError):
            topk_per_query(store, 4)

    def test_matches_full_sort(self):
        rng = np.random.default_rng(20)
        # coarse values force plenty of ties
        data = rng.integers(0, 50, size=(20, 500)).astype(np.float32) / 10
        store = DistanceStore(data, "euclidean")
        res = topk_per_query(store, 10, chunk=7)
        for q, r in enumerate(res):
            assert r.ranked_gallery.tolist() == oracle_ranking(data[q])[:10]
            assert np.all(np.diff(r.distances) >= 0)
        again = topk_per_query(store, 10)
        assert all(np.array_equal(a.ranked_gallery, b.ranked_gallery) for a, b in zip(res, again))
