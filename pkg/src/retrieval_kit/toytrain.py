"""Synthetic street/shop data and a small embedder trained with the combined loss.

The embedder is ``raw -> tanh(affine) -> affine`` (the "trunk", whose output
feeds the metric and center losses) followed by a batch-norm bottleneck and a
linear classifier (the "head"). Inference returns the L2-normalized
bottleneck output computed with running statistics.

Gradient accumulation runs the trunk sub-batch by sub-batch. The head, whose
losses couple samples through mining, dynamic margins and batch statistics, is
evaluated once on the embeddings of the whole mini-batch, and its gradient is
then pushed back through the trunk one sub-batch at a time. Parameters are
updated after the last sub-batch, so the trajectory matches the
single-pass step up to summation order.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .core import EmbeddingSet, ItemRecord, l2_normalize
from .errors import DivergenceError, StorageError, ValidationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class SynthConfig:
    n_products: int = 32          # held-out (test) products
    n_train_products: int = 1024
    raw_dim: int = 48
    embed_dim: int = 16
    hidden_dim: int = 64
    shop_per_product: int = 4
    street_per_product: int = 2
    shop_noise: float = 0.1
    street_noise: float = 0.25
    n_categories: int = 4
    clutter_dims: int = 16
    clutter_scale: float = 1.0
    distortion: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.street_noise > self.shop_noise > 0:
            raise ValidationError("need street_noise > shop_noise > 0")
        if not self.n_products >= self.n_categories >= 1:
            raise ValidationError("need n_products >= n_categories >= 1")
        if self.street_per_product < 1:
            raise ValidationError("street_per_product must be >= 1 (no queries otherwise)")
        if self.shop_per_product < 1:
            raise ValidationError("shop_per_product must be >= 1")
        if not 0 <= self.clutter_dims < self.raw_dim:
            raise ValidationError("clutter_dims must leave at least one informative dimension")
        if self.raw_dim - self.clutter_dims < self.n_categories:
            raise ValidationError("too few informative dimensions for the category blocks")


@dataclass
class TrainConfig:
    epochs: int = 120
    base_lr: float = 1e-4
    P: int = 16
    K: int = 4
    warmup_epochs: int = 10
    accumulation_steps: int = 1
    loss: str = "quadruplet"
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.base_lr <= 0 or self.P < 2 or self.K < 2:
            raise ValidationError("epochs >= 0, base_lr > 0, P >= 2 and K >= 2 required")
        if self.warmup_epochs < 0 or (self.epochs and self.warmup_epochs >= self.epochs):
            raise ValidationError("warmup_epochs must be below epochs")
        if self.accumulation_steps < 1 or self.P % self.accumulation_steps:
            raise ValidationError("accumulation_steps must divide P")
        if self.loss not in ("triplet", "quadruplet"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


# -- data -------------------------------------------------------------------

@dataclass
class SynthData:
    train: EmbeddingSet
    train_labels: np.ndarray
    queries: EmbeddingSet
    gallery: EmbeddingSet

    def test_set(self):
        """Queries and gallery stacked into one set (manifest rows 0..n-1)."""
        recs = [r for r in self.queries.records]
        off = len(recs)
        recs += [ItemRecord(r.id, r.product, r.category, r.domain, r.row + off)
                 for r in self.gallery.records]
        return EmbeddingSet(np.vstack([self.queries.matrix, self.gallery.matrix]), recs)


def _product_rows(cfg, index, category, D, rng):
    info = cfg.raw_dim - cfg.clutter_dims
    blocks = np.array_split(np.arange(info), cfg.n_categories)
    proto = np.zeros(cfg.raw_dim)
    block = blocks[category]
    proto[block] = rng.normal(size=block.size)

    # catalogue backdrop: fixed per product, lives in the clutter dimensions
    proto[info:] = rng.normal(scale=cfg.clutter_scale, size=cfg.clutter_dims)
    shop = proto + rng.normal(scale=cfg.shop_noise, size=(cfg.shop_per_product, cfg.raw_dim))
    offset = rng.normal(scale=0.5 * cfg.street_noise, size=info)
    street_center = np.zeros(cfg.raw_dim)
    street_center[:info] = D @ proto[:info] + offset
    street = street_center + rng.normal(scale=cfg.street_noise,
                                        size=(cfg.street_per_product, cfg.raw_dim))
    street[:, info:] = rng.normal(scale=cfg.clutter_scale,
                                  size=(cfg.street_per_product, cfg.clutter_dims))
    return shop, street


def generate_synthetic(cfg: SynthConfig) -> SynthData:
    """Seeded street/shop dataset with held-out test products.

    Shop rows are prototype + small noise; street rows apply a shared linear
    distortion plus a per-product offset, larger noise, and random clutter
    dimensions. Queries are street rows, gallery rows are shop rows.
    """
    info = cfg.raw_dim - cfg.clutter_dims
    drng = np.random.default_rng([cfg.seed, 1_000_003])
    D = np.eye(info) + cfg.distortion * drng.normal(size=(info, info)) / np.sqrt(info)

    def build(start, count, prefix):
        mats, recs, labels = [], [], []
        for i in range(count):
            idx = start + i
            cat = idx % cfg.n_categories
            shop, street = _product_rows(cfg, idx, cat, D, np.random.default_rng([cfg.seed, idx]))
            product = f"{prefix}{idx:05d}"
            category = f"cat{cat:02d}"
            for kind, block in (("gallery", shop), ("query", street)):
                for j, row in enumerate(block):
                    recs.append((f"{product}-{kind[0]}{j}", product, category, kind))
                    mats.append(row)
                    labels.append(i)
        return np.array(mats), recs, np.array(labels, dtype=np.int64)

    tm, trecs, tlabels = build(0, cfg.n_train_products, "p")
    train = EmbeddingSet(tm, [ItemRecord(*r, row=i) for i, r in enumerate(trecs)])
    xm, xrecs, _ = build(cfg.n_train_products, cfg.n_products, "p")
    q_idx = [i for i, r in enumerate(xrecs) if r[3] == "query"]
    g_idx = [i for i, r in enumerate(xrecs) if r[3] == "gallery"]
    queries = EmbeddingSet(xm[q_idx], [ItemRecord(*xrecs[i], row=k) for k, i in enumerate(q_idx)])
    gallery = EmbeddingSet(xm[g_idx], [ItemRecord(*xrecs[i], row=k) for k, i in enumerate(g_idx)])
    return SynthData(train, tlabels, queries, gallery)


# -- model ------------------------------------------------------------------

PARAM_NAMES = ("W1", "b1", "W2", "b2", "gamma", "beta", "Wc")
STATE_NAMES = PARAM_NAMES[:6] + ("running_mean", "running_var") + PARAM_NAMES[6:]
MODEL_MAGIC = b"TOY1"
MODEL_HEADER = struct.Struct("<4sIIIII")


@dataclass
class ToyEmbedder:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    Wc: np.ndarray

    @classmethod
    def init(cls, raw_dim, hidden_dim, embed_dim, n_classes, seed=0):
        rng = np.random.default_rng([seed, 7])
        return cls(
            W1=rng.normal(scale=1 / np.sqrt(raw_dim), size=(raw_dim, hidden_dim)),
            b1=np.zeros(hidden_dim),
            W2=rng.normal(scale=1 / np.sqrt(hidden_dim), size=(hidden_dim, embed_dim)),
            b2=np.zeros(embed_dim),
            gamma=np.ones(embed_dim),
            beta=np.zeros(embed_dim),
            running_mean=np.zeros(embed_dim),
            running_var=np.ones(embed_dim),
            Wc=rng.normal(scale=0.01, size=(embed_dim, n_classes)),
        )

    @property
    def raw_dim(self):
        return self.W1.shape[0]

    @property
    def hidden_dim(self):
        return self.W1.shape[1]

    @property
    def embed_dim(self):
        return self.W2.shape[1]

    @property
    def n_classes(self):
        return self.Wc.shape[1]

    def params(self):
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self):
        return ToyEmbedder(**{k: getattr(self, k).copy() for k in STATE_NAMES})

    def flat(self):
        return np.concatenate([getattr(self, k).ravel() for k in STATE_NAMES])

    def is_finite(self):
        return all(np.all(np.isfinite(getattr(self, k))) for k in STATE_NAMES)

    def to_bytes(self):
        head = MODEL_HEADER.pack(MODEL_MAGIC, 1, self.raw_dim, self.hidden_dim,
                                 self.embed_dim, self.n_classes)
        body = b"".join(np.ascontiguousarray(getattr(self, k), dtype="<f8").tobytes()
                        for k in STATE_NAMES)
        return head + body

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < MODEL_HEADER.size:
            raise ValidationError("model file truncated")
        magic, version, r, h, e, c = MODEL_HEADER.unpack_from(buf)
        if magic != MODEL_MAGIC or version != 1:
            raise ValidationError(f"bad model header {magic!r} v{version}")
        shapes = {"W1": (r, h), "b1": (h,), "W2": (h, e), "b2": (e,), "gamma": (e,),
                  "beta": (e,), "running_mean": (e,), "running_var": (e,), "Wc": (e, c)}
        need = MODEL_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
        if len(buf) != need:
            raise ValidationError(f"model file is {len(buf)} bytes, expected {need}")
        off, arrays = MODEL_HEADER.size, {}
        for k in STATE_NAMES:
            n = int(np.prod(shapes[k]))
            arrays[k] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shapes[k]).copy()
            off += 8 * n
        return cls(**arrays)

    def save(self, path):
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise StorageError(f"{path}: {exc.strerror or exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise StorageError(f"{path}: {exc.strerror or exc}") from exc


def trunk_forward(model, x):
    h = np.tanh(x @ model.W1 + model.b1)
    return h, h @ model.W2 + model.b2


def trunk_backward(model, x, h, grad_f):
    grads = {"W2": h.T @ grad_f, "b2": grad_f.sum(axis=0)}
    gz = (grad_f @ model.W2.T) * (1.0 - h * h)
    grads["W1"] = x.T @ gz
    grads["b1"] = gz.sum(axis=0)
    return grads


def embed(model: ToyEmbedder, raw) -> EmbeddingSet:
    """Inference features: bottleneck with running statistics, then L2 normalization."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != model.raw_dim:
        raise ValidationError(f"model expects {model.raw_dim}-d rows, got shape {raw.shape}")
    _, f = trunk_forward(model, raw)
    fb = (f - model.running_mean) / np.sqrt(model.running_var + BN_EPS) * model.gamma + model.beta
    return l2_normalize(EmbeddingSet(fb))


# -- schedule -------------------------------------------------------------

def warmup_lr(epoch, tcfg: TrainConfig) -> float:
    """Linear warm-up from base/10 to base, then x0.1 at 40% and 70% of the run."""
    base = tcfg.base_lr
    if epoch < tcfg.warmup_epochs:
        return base / 10 + (base - base / 10) * epoch / tcfg.warmup_epochs
    drops = sum(epoch >= m for m in decay_epochs(tcfg))
    return base * 0.1 ** drops


def decay_epochs(tcfg):
    return (int(round(0.4 * tcfg.epochs)), int(round(0.7 * tcfg.epochs)))


# -- training ---------------------------------------------------------------

def head_step(model, f, labels, centers, tcfg, lcfg):
    """Losses on the trunk outputs ``f`` of a whole mini-batch.

    Returns ``(terms, grad_f, head_grads, grad_centers, batch_stats)``.
    """
    b = f.shape[0]
    mu = f.mean(axis=0)
    var = f.var(axis=0)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    fhat = (f - mu) * inv
    fb = model.gamma * fhat + model.beta
    logits = fb @ model.Wc

    ce = L.label_smoothed_ce(logits, labels, lcfg.label_smoothing)
    grad_logits = ce.grads[0]
    head = {"Wc": fb.T @ grad_logits}
    g_fb = grad_logits @ model.Wc.T
    head["gamma"] = (g_fb * fhat).sum(axis=0)
    head["beta"] = g_fb.sum(axis=0)
    g_hat = g_fb * model.gamma
    grad_f = inv / b * (b * g_hat - g_hat.sum(axis=0) - fhat * (g_hat * fhat).sum(axis=0))

    batch = L.MiningBatch(f, labels)
    if tcfg.loss == "quadruplet":
        pos, neg, neg2 = L.quadruplet_mine(batch)
        metric = L.quadruplet_loss(f, f[pos], f[neg], f[neg2], lcfg)
        ga, gp, gn1, gn2 = metric.grads
        grad_f = grad_f + ga
        np.add.at(grad_f, pos, gp)
        np.add.at(grad_f, neg, gn1)
        np.add.at(grad_f, neg2, gn2)
    else:
        pos, neg = L.batch_hard_mine(batch)
        metric = L.triplet_loss(f, f[pos], f[neg], lcfg.triplet_margin)
        ga, gp, gn = metric.grads
        grad_f = grad_f + ga
        np.add.at(grad_f, pos, gp)
        np.add.at(grad_f, neg, gn)

    cen = L.center_loss(f, labels, centers)
    grad_f = grad_f + lcfg.center_weight * cen.grads[0]
    terms = {"ce": ce.value, "metric": metric.value, "center": cen.value}
    terms["total"] = ce.value + metric.value + lcfg.center_weight * cen.value
    return terms, grad_f, head, cen.grad_centers, (mu, var)


def train_step(model, x, labels, centers, tcfg, lcfg):
    """Gradients for one mini-batch, trunk evaluated in ``accumulation_steps`` pieces."""
    parts = np.array_split(np.arange(x.shape[0]), tcfg.accumulation_steps)
    f = np.vstack([trunk_forward(model, x[p])[1] for p in parts])
    # overflowing squared norms would otherwise surface as a "degenerate" batch
    if not np.isfinite(np.square(f).sum()):
        raise DivergenceError("non-finite embeddings")
    terms, grad_f, grads, grad_c, stats = head_step(model, f, labels, centers, tcfg, lcfg)
    for p in parts:
        h, _ = trunk_forward(model, x[p])
        for k, v in trunk_backward(model, x[p], h, grad_f[p]).items():
            grads[k] = grads[k] + v if k in grads else v
    return terms, grads, grad_c, stats


class Optimizer:
    def __init__(self, kind, betas=(0.9, 0.999), eps=1e-8):
        self.kind, self.betas, self.eps = kind, betas, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, model, grads, lr):
        self.t += 1
        b1, b2 = self.betas
        for k in PARAM_NAMES:
            g = grads[k]
            if self.kind == "sgd":
                update = g
            else:
                self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
                self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
                mhat = self.m[k] / (1 - b1 ** self.t)
                vhat = self.v[k] / (1 - b2 ** self.t)
                update = mhat / (np.sqrt(vhat) + self.eps)
            setattr(model, k, getattr(model, k) - lr * update)


def _pk_batches(labels, tcfg, rng):
    """Shuffle classes, group them P at a time and draw K rows per class."""
    classes = np.unique(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    order = rng.permutation(classes)
    for s in range(0, len(order) - tcfg.P + 1, tcfg.P):
        rows = [rng.choice(by_class[c], size=tcfg.K, replace=False) for c in order[s:s + tcfg.P]]
        yield np.concatenate(rows)


@dataclass
class TrainResult:
    model: ToyEmbedder
    centers: L.ClassCenters
    log: list = field(default_factory=list)
    skipped_batches: int = 0


def train(data: SynthData, model: ToyEmbedder, tcfg: TrainConfig, lcfg=None,
          evaluate_fn=None, trajectory=None) -> TrainResult:
    """Train ``model`` (a copy is made) and return it with a per-epoch log.

    ``evaluate_fn(model) -> dict`` is called every ``tcfg.eval_every`` epochs and
    after the last one. ``trajectory``, when a list, receives a flat parameter
    vector after every update.
    """
    lcfg = lcfg or L.LossParams()
    model = model.copy()
    x = np.asarray(data.train.matrix, dtype=np.float64)
    labels = np.asarray(data.train_labels)
    if x.shape[1] != model.raw_dim:
        raise ValidationError(f"model expects {model.raw_dim}-d rows, got {x.shape[1]}")
    counts = np.bincount(labels)
    if np.unique(labels).size < tcfg.P or counts[counts > 0].min() < tcfg.K:
        raise ValidationError("training data cannot fill a P x K batch")
    centers = L.ClassCenters.zeros(model.n_classes, model.embed_dim)
    rng = np.random.default_rng([tcfg.seed, 11])
    opt = Optimizer(tcfg.optimizer)
    result = TrainResult(model, centers)

    for epoch in range(tcfg.epochs):
        lr = warmup_lr(epoch, tcfg)
        sums, n = {}, 0
        for rows in _pk_batches(labels, tcfg, rng):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    terms, grads, grad_c, (mu, var) = train_step(model, x[rows], labels[rows],
                                                                 centers, tcfg, lcfg)
            except L.DegenerateBatchError:
                result.skipped_batches += 1
                continue
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}", epoch=epoch) from None
            if not np.isfinite(terms["total"]):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(model, grads, lr)
            centers.update(grad_c)
            b = len(rows)
            model.running_mean = (1 - BN_MOMENTUM) * model.running_mean + BN_MOMENTUM * mu
            model.running_var = (1 - BN_MOMENTUM) * model.running_var + BN_MOMENTUM * var * b / (b - 1)
            if not model.is_finite():
                raise DivergenceError(f"non-finite parameters at epoch {epoch}", epoch=epoch)
            if trajectory is not None:
                trajectory.append(model.flat())
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        entry = {"epoch": epoch, "lr": lr, "batches": n}
        entry.update({k: v / max(n, 1) for k, v in sums.items()})
        if evaluate_fn is not None and ((epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1):
            entry.update(evaluate_fn(model))
        result.log.append(entry)
    return result


def default_model(scfg: SynthConfig, seed=0):
    return ToyEmbedder.init(scfg.raw_dim, scfg.hidden_dim, scfg.embed_dim,
                            scfg.n_train_products, seed)


def config_dict(obj):
    return asdict(obj)


def evaluate_model(model, data: SynthData, config=None, cross=False):
    """Held-out retrieval report for ``model`` on the test split of ``data``."""
    from .distkernel import compute_distances
    from .metrics import cross_domain_eval, evaluate

    if cross:
        return cross_domain_eval(model, data.queries, data.gallery, config)
    q = embed(model, data.queries.matrix).with_records(data.queries.records)
    g = embed(model, data.gallery.matrix).with_records(data.gallery.records)
    metric = config.distance_metric if config is not None else "euclidean"
    return evaluate(q, g, compute_distances(q, g, metric), config)


def cross_domain_data(scfg: SynthConfig, seed=None, distortion=None) -> SynthData:
    """A second dataset: other prototype seed and (by default) twice the distortion."""
    from dataclasses import replace
    return generate_synthetic(replace(
        scfg,
        seed=scfg.seed + 1 if seed is None else seed,
        distortion=2 * scfg.distortion if distortion is None else distortion))
