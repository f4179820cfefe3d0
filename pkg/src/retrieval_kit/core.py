"""Data model, manifest / embedding-file I/O and row normalization."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import StorageError, ValidationError

DOMAINS = ("query", "gallery")

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
# magic, version u32, n_rows u64, dim u32, element type u8, 4 reserved bytes
EMB_HEADER = struct.Struct("<4sIQIB4x")
EMB_DTYPES = {0: np.dtype("<f4")}

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ItemRecord:
    id: str
    product: str
    category: str
    domain: str
    row: int

    def to_dict(self):
        return {"id": self.id, "product": self.product, "category": self.category,
                "domain": self.domain, "row": self.row}


@dataclass
class EmbeddingSet:
    """Row-major embedding matrix plus the records describing each row.

    ``records`` may be empty right after :func:`read_embeddings`; attach them
    with :meth:`with_records`.
    """

    matrix: np.ndarray
    records: list = field(default_factory=list)
    normalized: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2:
            raise ValidationError(f"embedding matrix must be 2-D, got shape {self.matrix.shape}")
        if self.records and len(self.records) != self.matrix.shape[0]:
            raise ValidationError(
                f"{len(self.records)} records for {self.matrix.shape[0]} embedding rows")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def with_records(self, records) -> "EmbeddingSet":
        return EmbeddingSet(self.matrix, list(records), self.normalized)

    def select(self, rows) -> "EmbeddingSet":
        """Sub-set of rows; records are kept aligned (their ``row`` field is renumbered)."""
        rows = np.asarray(rows, dtype=np.int64)
        recs = []
        if self.records:
            recs = [replace(self.records[r], row=i) for i, r in enumerate(rows)]
        return EmbeddingSet(self.matrix[rows], recs, self.normalized)

    def split_domains(self):
        """Return ``(queries, gallery)`` sub-sets ordered by record row."""
        if not self.records:
            raise ValidationError("records must be attached before splitting by domain")
        by_row = sorted(self.records, key=lambda r: r.row)
        q = [r.row for r in by_row if r.domain == "query"]
        g = [r.row for r in by_row if r.domain == "gallery"]
        return self.select(q), self.select(g)


@dataclass
class EvalConfig:
    distance_metric: str = "euclidean"
    k_values: tuple = (1, 10, 20, 50)
    constrained: str = "none"
    rerank: Optional[object] = None

    def __post_init__(self):
        if self.distance_metric not in ("euclidean", "cosine"):
            raise ValidationError(f"unknown distance metric {self.distance_metric!r}")
        if self.constrained not in ("none", "by_category"):
            raise ValidationError(f"unknown constraint mode {self.constrained!r}")
        ks = tuple(int(k) for k in self.k_values)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(ks):
            raise ValidationError(f"k_values must be ascending positive integers, got {self.k_values}")
        self.k_values = ks


def _record_from_obj(obj, lineno):
    if not isinstance(obj, dict):
        raise ValidationError(f"line {lineno}: expected a JSON object")
    try:
        rec = ItemRecord(id=str(obj["id"]), product=str(obj["product"]),
                         category=str(obj["category"]), domain=obj["domain"], row=obj["row"])
    except KeyError as exc:
        raise ValidationError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    if rec.domain not in DOMAINS:
        raise ValidationError(f"line {lineno}: unknown domain {rec.domain!r}")
    if isinstance(rec.row, bool) or not isinstance(rec.row, int) or rec.row < 0:
        raise ValidationError(f"line {lineno}: row must be a non-negative integer")
    if not rec.product:
        raise ValidationError(f"line {lineno}: product must be non-empty")
    return rec


def load_manifest(path) -> list:
    """Read a JSON-lines manifest, one :class:`ItemRecord` per non-blank line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc
    records, ids, rows = [], set(), set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
        try:
            rec = _record_from_obj(obj, lineno)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None
        if rec.id in ids:
            raise ValidationError(f"{path}: line {lineno}: duplicate id {rec.id!r}")
        if rec.row in rows:
            raise ValidationError(f"{path}: line {lineno}: duplicate row {rec.row}")
        ids.add(rec.id)
        rows.add(rec.row)
        records.append(rec)
    return records


def save_manifest(records, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict()) + "\n")
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc


def check_ground_truth(records) -> list:
    """Ids of query records whose product has no gallery row (reported, not fatal)."""
    gallery_products = {r.product for r in records if r.domain == "gallery"}
    return [r.id for r in records if r.domain == "query" and r.product not in gallery_products]


def write_embeddings(emb, path) -> None:
    matrix = emb.matrix if isinstance(emb, EmbeddingSet) else np.asarray(emb)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValidationError(f"cannot write empty embedding matrix (shape {matrix.shape})")
    n_rows, dim = matrix.shape
    header = EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, n_rows, dim, 0)
    payload = np.ascontiguousarray(matrix, dtype=EMB_DTYPES[0])
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc


def read_embeddings(path, mmap: bool = False) -> EmbeddingSet:
    """Read an ``EMB1`` file. With ``mmap=True`` the matrix is a read-only memory map."""
    path = Path(path)
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            head = fh.read(EMB_HEADER.size)
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc
    if len(head) < EMB_HEADER.size:
        raise ValidationError(f"{path}: truncated header ({len(head)} of {EMB_HEADER.size} bytes)")
    magic, version, n_rows, dim, etype = EMB_HEADER.unpack(head)
    if magic != EMB_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    if etype not in EMB_DTYPES:
        raise ValidationError(f"{path}: unsupported element type code {etype}")
    dtype = EMB_DTYPES[etype]
    expected = n_rows * dim * dtype.itemsize
    actual = size - EMB_HEADER.size
    if actual != expected:
        raise ValidationError(
            f"{path}: payload is {actual} bytes, expected {expected} for {n_rows}x{dim}")
    if mmap:
        matrix = np.memmap(path, dtype=dtype, mode="r", offset=EMB_HEADER.size, shape=(n_rows, dim))
    else:
        matrix = np.fromfile(path, dtype=dtype, offset=EMB_HEADER.size).reshape(n_rows, dim)
    return EmbeddingSet(matrix)


def load_dataset(manifest_path, embeddings_path) -> EmbeddingSet:
    """Manifest + embedding file, validated for row consistency."""
    records = load_manifest(manifest_path)
    emb = read_embeddings(embeddings_path)
    bad = [r.row for r in records if r.row >= emb.n_rows]
    if bad:
        raise ValidationError(
            f"{manifest_path}: row {bad[0]} out of range for {embeddings_path} ({emb.n_rows} rows)")
    if len(records) != emb.n_rows:
        raise ValidationError(
            f"{manifest_path}: {len(records)} records but {embeddings_path} has {emb.n_rows} rows")
    return emb.with_records(sorted(records, key=lambda r: r.row))


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    m = np.asarray(emb.matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    small = np.flatnonzero(norms < NORM_EPS)
    if small.size:
        raise ValidationError(f"row {int(small[0])} has near-zero norm ({norms[small[0]]:.3g})")
    out = (m / norms[:, None]).astype(emb.matrix.dtype if emb.matrix.dtype.kind == "f" else np.float64)
    return EmbeddingSet(out, list(emb.records), normalized=True)
