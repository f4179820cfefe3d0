"""Metric-learning and classification losses with analytic gradients.

All losses are mean-reduced over the batch except center loss, which sums
(half squared distances) as in its usual definition. Hinge subgradients take
the zero branch at the kink. Dynamic quadruplet margins are treated as
constants during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError


class DegenerateBatchError(ValidationError):
    """Batch statistics are unusable (e.g. non-finite margins); skip the batch."""


@dataclass
class LossParams:
    triplet_margin: float = 0.3
    g1: float = 1.0
    g2: float = 0.5
    margin_clamp: tuple = (0.05, 2.0)
    center_weight: float = 0.0005
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.triplet_margin <= 0:
            raise ValidationError("triplet margin must be > 0")
        if self.g2 > self.g1:
            raise ValidationError(f"g2={self.g2} must not exceed g1={self.g1}")
        if self.center_weight < 0:
            raise ValidationError("center weight must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValidationError("label smoothing must lie in [0, 1)")
        lo, hi = self.margin_clamp
        if not 0 <= lo <= hi:
            raise ValidationError(f"bad margin clamp range {self.margin_clamp}")


@dataclass
class LossOutput:
    """Scalar loss, one gradient per positional input, optional center gradient.

    ``hinges`` holds hinge pre-activations so gradient checks can skip kinks.
    """

    value: float
    grads: tuple
    grad_centers: Optional[np.ndarray] = None
    hinges: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def grad_embeddings(self):
        return self.grads[0]


@dataclass
class ClassCenters:
    centers: np.ndarray
    update_rate: float = 0.5

    def __post_init__(self):
        self.centers = np.array(self.centers, dtype=np.float64)
        if not np.all(np.isfinite(self.centers)):
            raise ValidationError("class centers must be finite")

    @classmethod
    def zeros(cls, n_classes, dim, update_rate=0.5):
        return cls(np.zeros((n_classes, dim)), update_rate)

    def update(self, grad_centers):
        self.centers -= self.update_rate * grad_centers


@dataclass
class MiningBatch:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.labels.shape[0]:
            raise ValidationError("embeddings must be B x dim with one label per row")
        uniq, counts = np.unique(self.labels, return_counts=True)
        if uniq.size < 2:
            raise ValidationError("a batch needs at least 2 distinct labels")
        if np.any(counts != counts[0]):
            raise ValidationError("every label must appear the same number of times (P x K)")
        if counts[0] < 2:
            raise ValidationError("K=1: anchors have no positive")

    @property
    def P(self):
        return np.unique(self.labels).size

    @property
    def K(self):
        return self.labels.shape[0] // self.P


def _as2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _check(*arrays):
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise ValidationError(f"shape mismatch: {[x.shape for x in arrays]}")
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite input")


def sq_dist(x, y):
    d = x - y
    return np.einsum("ij,ij->i", d, d)


def pairwise_sq(x):
    d = x[:, None, :] - x[None, :, :]
    return np.square(d).sum(axis=-1)


def batch_hard_mine(batch: MiningBatch, squared=True):
    """Hardest positive (farthest same label) and hardest negative (nearest other label).

    Ties go to the lowest index.
    """
    d = pairwise_sq(batch.embeddings)
    if not squared:
        d = np.sqrt(d)
    same = batch.labels[:, None] == batch.labels[None, :]
    eye = np.eye(len(batch.labels), dtype=bool)
    pos = np.argmax(np.where(same & ~eye, d, -np.inf), axis=1)
    neg = np.argmin(np.where(~same, d, np.inf), axis=1)
    return pos, neg


def quadruplet_mine(batch: MiningBatch, squared=True):
    """Batch-hard positive/negative plus, per anchor, the nearest point to its
    negative whose label differs from both the anchor and that negative."""
    pos, neg = batch_hard_mine(batch, squared)
    if batch.P < 3:
        raise ValidationError("quadruplet mining needs at least 3 distinct labels")
    d = pairwise_sq(batch.embeddings)
    if not squared:
        d = np.sqrt(d)
    lab = batch.labels
    valid = (lab[None, :] != lab[:, None]) & (lab[None, :] != lab[neg][:, None])
    neg2 = np.argmin(np.where(valid, d[neg], np.inf), axis=1)
    return pos, neg, neg2


def triplet_loss(anchor, positive, negative, margin=0.3) -> LossOutput:
    a, p, n = _as2d(anchor), _as2d(positive), _as2d(negative)
    _check(a, p, n)
    if margin <= 0:
        raise ValidationError("margin must be > 0")
    t = a.shape[0]
    z = sq_dist(a, p) - sq_dist(a, n) + margin
    act = (z > 0).astype(np.float64)[:, None] / t
    grads = (2.0 * (n - p) * act, -2.0 * (a - p) * act, 2.0 * (a - n) * act)
    return LossOutput(float(np.maximum(z, 0).mean()), grads, hinges=z)


def dynamic_margins(d_ap, d_an, params: LossParams):
    """Margins from batch means of squared positive / negative distances."""
    with np.errstate(invalid="ignore", over="ignore"):
        gap = float(np.mean(d_an) - np.mean(d_ap))
    if not np.isfinite(gap):
        raise DegenerateBatchError("non-finite dynamic margin")
    lo, hi = params.margin_clamp
    return float(np.clip(params.g1 * gap, lo, hi)), float(np.clip(params.g2 * gap, lo, hi))


def quadruplet_loss(anchor, positive, negative1, negative2, params=None, margins=None,
                    labels=None) -> LossOutput:
    """Two-hinge quadruplet loss.

    ``margins=(alpha1, alpha2)`` overrides the batch-derived dynamic margins.
    ``labels=(anchor, negative1, negative2)`` label arrays are checked when given.
    """
    params = params or LossParams()
    a, p, n1, n2 = (_as2d(x) for x in (anchor, positive, negative1, negative2))
    _check(a, p, n1, n2)
    if labels is not None:
        la, l1, l2 = (np.asarray(x) for x in labels)
        if np.any(la == l1) or np.any(la == l2) or np.any(l1 == l2):
            raise ValidationError("anchor, negative1 and negative2 must carry distinct labels")
    t = a.shape[0]
    d_ap, d_an, d_nn = sq_dist(a, p), sq_dist(a, n1), sq_dist(n2, n1)
    if margins is None:
        margins = dynamic_margins(d_ap, d_an, params)
    a1, a2 = margins
    z1 = d_ap - d_an + a1
    z2 = d_ap - d_nn + a2
    w1 = (z1 > 0).astype(np.float64)[:, None] / t
    w2 = (z2 > 0).astype(np.float64)[:, None] / t
    ga = 2.0 * (n1 - p) * w1 + 2.0 * (a - p) * w2
    gp = -2.0 * (a - p) * (w1 + w2)
    gn1 = 2.0 * (a - n1) * w1 + 2.0 * (n2 - n1) * w2
    gn2 = -2.0 * (n2 - n1) * w2
    value = float((np.maximum(z1, 0) + np.maximum(z2, 0)).mean())
    return LossOutput(value, (ga, gp, gn1, gn2), hinges=np.concatenate([z1, z2]),
                      info={"alpha1": a1, "alpha2": a2})


def center_loss(embeddings, labels, centers: ClassCenters) -> LossOutput:
    """Half the summed squared distance of each embedding to its class center.

    ``grad_centers`` is the per-class negative mean of ``f - c`` over batch
    members (zero for absent classes); ``ClassCenters.update`` applies it.
    """
    f = _as2d(embeddings)
    labels = np.asarray(labels)
    c = centers.centers
    if labels.shape[0] != f.shape[0]:
        raise ValidationError("one label per embedding required")
    if labels.size and (labels.min() < 0 or labels.max() >= c.shape[0]):
        bad = labels[(labels < 0) | (labels >= c.shape[0])][0]
        raise ValidationError(f"unknown label {bad}")
    if f.shape[1] != c.shape[1]:
        raise ValidationError(f"embedding dim {f.shape[1]} != center dim {c.shape[1]}")
    diff = f - c[labels]
    value = 0.5 * float(np.square(diff).sum())
    grad_c = np.zeros_like(c)
    for y in np.unique(labels):
        grad_c[y] = -diff[labels == y].mean(axis=0)
    return LossOutput(value, (diff,), grad_centers=grad_c)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def label_smoothed_ce(logits, labels, epsilon=0.1) -> LossOutput:
    """Cross-entropy against ``(1 - eps) * onehot + eps / C`` targets, batch-mean."""
    z = _as2d(logits)
    labels = np.asarray(labels)
    if not 0 <= epsilon < 1:
        raise ValidationError("epsilon must lie in [0, 1)")
    b, n_classes = z.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(f"labels must be {b} integers in [0, {n_classes})")
    target = np.full_like(z, epsilon / n_classes)
    target[np.arange(b), labels] += 1.0 - epsilon
    logp = log_softmax(z)
    value = float(-(target * logp).sum(axis=1).mean())
    grad = (np.exp(logp) - target) / b
    return LossOutput(value, (grad,))


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    n_excluded: int
    tolerance: float

    def to_dict(self):
        return {"max_rel_error": self.max_rel_error, "passed": self.passed,
                "n_checked": self.n_checked, "n_excluded": self.n_excluded,
                "tolerance": self.tolerance}


def finite_diff_check(loss_fn, inputs, step=1e-4, tolerance=1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn(*inputs)`` with central differences.

    ``loss_fn`` returns a :class:`LossOutput` (or ``(value, grads)``). A
    coordinate is excluded when a hinge it moves has pre-activation within
    ``10 * step`` of zero.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]

    def call(args):
        out = loss_fn(*args)
        if isinstance(out, tuple):
            out = LossOutput(out[0], tuple(out[1]))
        return out

    base = call(inputs)
    again = call([x.copy() for x in inputs])
    if again.value != base.value:
        raise ValidationError("loss_fn is not deterministic")
    hinges = base.hinges
    worst, checked, excluded = 0.0, 0, 0
    for k, x in enumerate(inputs):
        analytic = np.broadcast_to(np.asarray(base.grads[k], dtype=np.float64), x.shape)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            up = call(inputs)
            x[idx] = orig - step
            down = call(inputs)
            x[idx] = orig
            if hinges is not None:
                moved = (up.hinges != hinges) | (down.hinges != hinges)
                if np.any(np.abs(hinges[moved]) <= 10 * step):
                    excluded += 1
                    continue
            numeric = (up.value - down.value) / (2 * step)
            err = abs(numeric - analytic[idx]) / max(1.0, abs(analytic[idx]))
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, worst <= tolerance, checked, excluded, tolerance)


def gradcheck_suite(n_points=50, seed=0, step=1e-4, tolerance=1e-4, batch=8, dim=6):
    """Run the finite-difference check for every loss at ``n_points`` random points."""
    rng = np.random.default_rng(seed)
    params = LossParams()
    results = {}

    def run(name, make):
        reps = [make() for _ in range(n_points)]
        results[name] = {
            "points": n_points,
            "max_rel_error": max(r.max_rel_error for r in reps),
            "n_checked": sum(r.n_checked for r in reps),
            "n_excluded": sum(r.n_excluded for r in reps),
            "passed": all(r.passed for r in reps),
            "tolerance": tolerance,
        }

    def trip():
        a, p, n = rng.normal(size=(3, batch, dim))
        return finite_diff_check(lambda a, p, n: triplet_loss(a, p, n, params.triplet_margin),
                                 [a, p, n], step, tolerance)

    def quad():
        a, p, n1, n2 = rng.normal(size=(4, batch, dim))
        margins = dynamic_margins(sq_dist(a, p), sq_dist(a, n1), params)
        return finite_diff_check(
            lambda a, p, n1, n2: quadruplet_loss(a, p, n1, n2, params, margins=margins),
            [a, p, n1, n2], step, tolerance)

    def center():
        n_classes = 4
        f = rng.normal(size=(batch, dim))
        labels = rng.integers(0, n_classes, size=batch)
        cc = ClassCenters(rng.normal(size=(n_classes, dim)))
        return finite_diff_check(lambda f: center_loss(f, labels, cc), [f], step, tolerance)

    def ce():
        n_classes = 5
        z = rng.normal(scale=2.0, size=(batch, n_classes))
        labels = rng.integers(0, n_classes, size=batch)
        return finite_diff_check(lambda z: label_smoothed_ce(z, labels, params.label_smoothing),
                                 [z], step, tolerance)

    run("triplet", trip)
    run("quadruplet", quad)
    run("center", center)
    run("label_smoothed_ce", ce)
    return results
