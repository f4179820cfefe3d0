"""Tiled, optionally disk-spilled query x gallery distance matrices.

Every entry is computed on its own (difference vector, then a reduction along
the contiguous feature axis), so the stored bytes do not depend on the tile
shape or on how many workers ran. Spilled stores are a raw little-endian
float32 payload ``<name>.dist`` plus a JSON header ``<name>.dist.json``.
"""

from __future__ import annotations

import json
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EmbeddingSet
from .errors import StorageError, ValidationError

METRICS = ("euclidean", "cosine")
STORE_DTYPE = np.dtype("<f4")
# float64 scratch per inner chunk of a tile (rows x cols x dim), ~32 MB
_SCRATCH_ELEMS = 4 * 1024 * 1024


@dataclass(frozen=True)
class TileSpec:
    query_block: int = 1024
    gallery_block: int = 4096

    def __post_init__(self):
        if self.query_block < 1 or self.gallery_block < 1:
            raise ValidationError(f"tile sizes must be >= 1, got {self.query_block}x{self.gallery_block}")


class DistanceStore:
    """Immutable Q x G matrix of non-negative float32 distances.

    ``data`` is either an in-memory array or a read-only ``np.memmap``;
    both index the same way.
    """

    def __init__(self, data, metric, path=None):
        if metric not in METRICS:
            raise ValidationError(f"unknown metric {metric!r}")
        self.data = data
        self.metric = metric
        self.path = Path(path) if path is not None else None

    @property
    def backing(self):
        return "in_memory" if self.path is None else "disk_spilled"

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_queries(self):
        return self.data.shape[0]

    @property
    def n_gallery(self):
        return self.data.shape[1]

    def __getitem__(self, idx):
        return self.data[idx]

    def row(self, q):
        return np.asarray(self.data[q])

    def rows(self, start, stop):
        return np.asarray(self.data[start:stop])

    def to_array(self):
        return np.array(self.data)

    def save(self, path):
        """Write this store in the spill layout, regardless of its backing."""
        return _write_spill(Path(path), self.data.shape, self.metric,
                            lambda out: out.__setitem__(slice(None), self.data))

    def __repr__(self):
        return f"DistanceStore({self.n_queries}x{self.n_gallery}, {self.metric}, {self.backing})"


def _header_path(path):
    return Path(str(path) + ".json")


def _write_spill(path, shape, metric, fill):
    """Create ``path`` atomically: fill a temp memmap, flush, then rename."""
    path = Path(path)
    n_q, n_g = shape
    nbytes = n_q * n_g * STORE_DTYPE.itemsize
    parent = path.parent if str(path.parent) else Path(".")
    try:
        parent.mkdir(parents=True, exist_ok=True)
        free = shutil.disk_usage(parent).free
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc
    if nbytes > free:
        raise StorageError(f"{path}: need {nbytes} bytes, only {free} free")
    tmp = path.with_name(path.name + ".tmp")
    try:
        if nbytes:
            out = np.memmap(tmp, dtype=STORE_DTYPE, mode="w+", shape=(n_q, n_g))
            fill(out)
            out.flush()
            del out
        else:
            tmp.write_bytes(b"")
        os.replace(tmp, path)
        header = {"n_queries": int(n_q), "n_gallery": int(n_g), "metric": metric,
                  "dtype": "float32", "order": "row-major", "version": 1}
        _header_path(path).write_text(json.dumps(header, indent=2) + "\n")
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc
    return open_store(path)


def open_store(path) -> DistanceStore:
    """Open a spilled store read-only without loading the payload."""
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text())
        size = os.path.getsize(path)
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{_header_path(path)}: malformed header ({exc.msg})") from None
    n_q, n_g = int(header["n_queries"]), int(header["n_gallery"])
    if size != n_q * n_g * STORE_DTYPE.itemsize:
        raise ValidationError(f"{path}: payload is {size} bytes, expected {n_q * n_g * 4}")
    if size == 0:
        data = np.zeros((n_q, n_g), dtype=STORE_DTYPE)
    else:
        data = np.memmap(path, dtype=STORE_DTYPE, mode="r", shape=(n_q, n_g))
    return DistanceStore(data, header["metric"], path)


def pairwise_block(q, g, metric):
    """Exact distances between the rows of ``q`` and ``g`` as float32.

    Each entry uses one elementwise pass and one reduction along the last axis,
    which makes the result independent of the block shape.
    """
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    out = np.empty((q.shape[0], g.shape[0]), dtype=STORE_DTYPE)
    dim = max(q.shape[1], 1)
    step = max(1, _SCRATCH_ELEMS // max(1, g.shape[0] * dim))
    for s in range(0, q.shape[0], step):
        qs = q[s:s + step, None, :]
        if metric == "euclidean":
            diff = qs - g[None, :, :]
            d = np.sqrt(np.square(diff).sum(axis=-1))
        else:
            d = 1.0 - (qs * g[None, :, :]).sum(axis=-1)
            np.maximum(d, 0.0, out=d)
        out[s:s + step] = d
    return out


def _tiles(n_q, n_g, tiles):
    for qs in range(0, n_q, tiles.query_block):
        for gs in range(0, n_g, tiles.gallery_block):
            yield qs, min(qs + tiles.query_block, n_q), gs, min(gs + tiles.gallery_block, n_g)


def compute_distances(queries, gallery, metric="euclidean", tiles=None,
                      backing="in_memory", path=None, workers=1) -> DistanceStore:
    """Fill a Q x G distance store tile by tile.

    ``backing`` is ``"in_memory"`` or ``"disk"``; the latter needs ``path`` and
    writes through a temporary file that is renamed only once complete.
    """
    tiles = tiles or TileSpec()
    qm = queries.matrix if isinstance(queries, EmbeddingSet) else np.asarray(queries)
    gm = gallery.matrix if isinstance(gallery, EmbeddingSet) else np.asarray(gallery)
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    if qm.ndim != 2 or gm.ndim != 2 or qm.shape[1] != gm.shape[1]:
        raise ValidationError(f"dimension mismatch: queries {qm.shape} vs gallery {gm.shape}")
    if metric == "cosine":
        for name, s in (("queries", queries), ("gallery", gallery)):
            if isinstance(s, EmbeddingSet) and not s.normalized:
                raise ValidationError(f"cosine distance needs normalized {name}")
    n_q, n_g = qm.shape[0], gm.shape[0]

    def fill(out):
        def work(t):
            q0, q1, g0, g1 = t
            out[q0:q1, g0:g1] = pairwise_block(qm[q0:q1], gm[g0:g1], metric)
        jobs = list(_tiles(n_q, n_g, tiles))
        if workers <= 1 or len(jobs) <= 1:
            for t in jobs:
                work(t)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(work, jobs))

    if backing == "in_memory":
        out = np.empty((n_q, n_g), dtype=STORE_DTYPE)
        fill(out)
        return DistanceStore(out, metric)
    if backing in ("disk", "disk_spilled"):
        if path is None:
            raise ValidationError("disk backing needs an output path")
        return _write_spill(Path(path), (n_q, n_g), metric, fill)
    raise ValidationError(f"unknown backing {backing!r}")


def topk_per_query(store, k, rows=None, chunk=256):
    """Per query, the ``k`` nearest gallery indices and their distances.

    Ties are broken by ascending gallery index. Returns a list of
    ``RankedResult``.
    """
    from .metrics import RankedResult

    if k < 1 or k > store.n_gallery:
        raise ValidationError(f"k={k} outside [1, {store.n_gallery}]")
    rows = range(store.n_queries) if rows is None else rows
    rows = list(rows)
    results = []
    for s in range(0, len(rows), chunk):
        idx = rows[s:s + chunk]
        block = np.asarray(store.data[idx])
        order = np.argsort(block, axis=1, kind="stable")[:, :k]
        dists = np.take_along_axis(block, order, axis=1)
        for q, o, d in zip(idx, order, dists):
            results.append(RankedResult(int(q), o.astype(np.int64), d))
    return results
