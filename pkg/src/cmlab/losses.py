"""Contrastive objectives over grouped embeddings, with analytic gradients.

Three objectives share one masked softmax cross-entropy core:

* ``nce_loss``      -- conflict-unaware InfoNCE over index-matched pairs,
* ``cccl_loss``     -- cross-modal conflict-aware loss (label-matched positives),
* ``iccl_loss``     -- intra-modal conflict-aware loss (anchor excluded from
                       both the positive and the negative set).

Anchors are rows of the first embedding argument. Every function returns a
LossReport carrying the scalar value and the gradient with respect to every
input feature row, treating rows as free vectors (no unit-norm projection),
which is what a finite-difference check differentiates.

Numerical notes: softmax rows subtract their masked maximum before
exponentiation and masked-out entries never enter any arithmetic, so an
anchor's self-similarity may hold arbitrary values without affecting results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 0.07


def _features(x) -> np.ndarray:
    feats = x.features if hasattr(x, "features") else (x[0] if isinstance(x, tuple) else x)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"embeddings must form a 2-D matrix, got shape {feats.shape}")
    return feats


def _labels(x, count: int) -> np.ndarray:
    labels = x.labels if hasattr(x, "labels") else x[1]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (count,):
        raise ValueError("labels must have one entry per embedding row")
    return labels


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Raw scalar products between two embedding sets plus the temperature."""

    values: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"similarity matrix must be 2-D, got shape {values.shape}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_embeddings(cls, a, b, tau: float = DEFAULT_TAU) -> "SimilarityMatrix":
        return cls(values=_features(a) @ _features(b).T, tau=tau)


@dataclass(frozen=True, eq=False)
class PositiveSet:
    """Per-anchor positive columns and the columns allowed in the denominator."""

    positive: np.ndarray  # a x b bool
    allowed: np.ndarray   # a x b bool, superset of positive

    def __post_init__(self) -> None:
        pos = np.ascontiguousarray(self.positive, dtype=bool)
        allowed = np.ascontiguousarray(self.allowed, dtype=bool)
        if pos.shape != allowed.shape:
            raise ValueError("positive and allowed masks must share a shape")
        if np.any(pos & ~allowed):
            raise ValueError("every positive column must also be allowed")
        object.__setattr__(self, "positive", pos)
        object.__setattr__(self, "allowed", allowed)

    @classmethod
    def matched_pairs(cls, m: int) -> "PositiveSet":
        eye = np.eye(m, dtype=bool)
        return cls(positive=eye, allowed=np.ones((m, m), dtype=bool))

    @classmethod
    def cross_modal(cls, anchor_labels, other_labels) -> "PositiveSet":
        anchor_labels = np.asarray(anchor_labels).reshape(-1, 1)
        other_labels = np.asarray(other_labels).reshape(1, -1)
        pos = anchor_labels == other_labels
        return cls(positive=pos, allowed=np.ones_like(pos, dtype=bool))

    @classmethod
    def intra_modal(cls, labels) -> "PositiveSet":
        labels = np.asarray(labels)
        same = labels.reshape(-1, 1) == labels.reshape(1, -1)
        off_diag = ~np.eye(labels.size, dtype=bool)
        return cls(positive=same & off_diag, allowed=off_diag)

    def index_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.positive]


@dataclass(frozen=True, eq=False)
class LossReport:
    """Scalar loss plus gradients for every input row that exists."""

    value: float
    grad_q: np.ndarray | None
    grad_k: np.ndarray | None
    contributing_anchors: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"loss value must be finite and non-negative, got {self.value}")


def loss_from_similarity(
    sim: SimilarityMatrix, positives: PositiveSet, reduction: str = "mean"
) -> tuple[float, np.ndarray, int]:
    """Masked softmax cross-entropy core shared by the three losses.

    Per anchor row r with positive columns P(r) and allowed columns D(r):

        term(r) = -(1/|P(r)|) sum_{p in P(r)} log softmax_{D(r)}(values[r]/tau)_p

    Anchors with empty P(r) are skipped. Returns the reduced value, the
    gradient with respect to ``sim.values``, and the contributing-anchor count.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if positives.positive.shape != sim.values.shape:
        raise ValueError(
            f"positive set shape {positives.positive.shape} does not match "
            f"similarity shape {sim.values.shape}"
        )
    allowed = positives.allowed
    pos = positives.positive
    # scrub masked-out entries before any arithmetic so they cannot propagate
    z = np.where(allowed, sim.values, 0.0) / sim.tau

    has_allowed = allowed.any(axis=1)
    row_max = np.where(has_allowed, np.where(allowed, z, -np.inf).max(axis=1), 0.0)
    expz = np.exp(np.where(allowed, z - row_max[:, None], -np.inf))
    denom = expz.sum(axis=1)
    lse = row_max + np.log(np.where(has_allowed, denom, 1.0))

    pos_count = pos.sum(axis=1)
    contributing = pos_count > 0
    n_contrib = int(np.count_nonzero(contributing))
    if n_contrib == 0:
        return 0.0, np.zeros_like(sim.values), 0

    safe_count = np.where(contributing, pos_count, 1)
    pos_mean = np.where(pos, z, 0.0).sum(axis=1) / safe_count
    terms = np.where(contributing, lse - pos_mean, 0.0)
    value = float(terms.sum())
    scale = 1.0
    if reduction == "mean":
        value /= n_contrib
        scale = 1.0 / n_contrib

    softmax = expz / np.where(has_allowed, denom, 1.0)[:, None]
    grad = (softmax - pos / safe_count[:, None]) * (scale / sim.tau)
    grad[~contributing] = 0.0
    # each term is -log of a probability, hence >= 0 up to rounding
    return max(value, 0.0), grad, n_contrib


def nce_loss(q, k, tau: float = DEFAULT_TAU) -> LossReport:
    """Conflict-unaware InfoNCE: anchor q_i pairs with k_i, all k_j in the
    denominator (matched term included)."""
    qf = _features(q)
    kf = _features(k)
    if qf.shape[0] != kf.shape[0]:
        raise ValueError(f"sets must be index-aligned, got counts {qf.shape[0]} and {kf.shape[0]}")
    if qf.shape[0] < 1:
        raise ValueError("need at least one matched pair")
    sim = SimilarityMatrix(values=qf @ kf.T, tau=tau)
    value, grad_sim, contrib = loss_from_similarity(sim, PositiveSet.matched_pairs(qf.shape[0]))
    return LossReport(
        value=value,
        grad_q=grad_sim @ kf,
        grad_k=grad_sim.T @ qf,
        contributing_anchors=contrib,
    )


def cccl_loss(k, q, tau: float = DEFAULT_TAU, reduction: str = "mean") -> LossReport:
    """Cross-modal conflict-aware loss: point-group anchors k_j, positives are
    all pixel groups sharing the anchor's label, denominator over all of Q'.

    Anchors with no same-label pixel group are skipped (and not counted);
    with no contributing anchor at all the value is 0 and flagged via
    ``contributing_anchors == 0``.
    """
    kf = _features(k)
    qf = _features(q)
    if kf.shape[0] < 1 or qf.shape[0] < 1:
        raise ValueError("both embedding sets must be non-empty")
    positives = PositiveSet.cross_modal(_labels(k, kf.shape[0]), _labels(q, qf.shape[0]))
    sim = SimilarityMatrix(values=kf @ qf.T, tau=tau)
    value, grad_sim, contrib = loss_from_similarity(sim, positives, reduction)
    return LossReport(
        value=value,
        grad_q=grad_sim.T @ kf,
        grad_k=grad_sim @ qf,
        contributing_anchors=contrib,
    )


def iccl_loss(k, tau: float = DEFAULT_TAU, reduction: str = "mean") -> LossReport:
    """Intra-modal conflict-aware loss over point groups: same-label positives,
    the anchor itself removed from both the positive and the negative set."""
    kf = _features(k)
    if kf.shape[0] < 1:
        raise ValueError("embedding set must be non-empty")
    positives = PositiveSet.intra_modal(_labels(k, kf.shape[0]))
    sim = SimilarityMatrix(values=kf @ kf.T, tau=tau)
    value, grad_sim, contrib = loss_from_similarity(sim, positives, reduction)
    return LossReport(
        value=value,
        grad_q=None,
        grad_k=grad_sim @ kf + grad_sim.T @ kf,
        contributing_anchors=contrib,
    )


def combined_objective(
    q,
    k,
    weights: tuple[float, float] = (1.0, 1.0),
    tau: float = DEFAULT_TAU,
    reduction: str = "mean",
) -> LossReport:
    """Weighted sum of the cross- and intra-modal conflict-aware losses."""
    w_c, w_i = weights
    if w_c < 0 or w_i < 0:
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    if w_c == 0 and w_i == 0:
        raise ValueError("at least one loss weight must be positive")
    cross = cccl_loss(k, q, tau, reduction)
    intra = iccl_loss(k, tau, reduction)
    return LossReport(
        value=w_c * cross.value + w_i * intra.value,
        grad_q=w_c * cross.grad_q,
        grad_k=w_c * cross.grad_k + w_i * intra.grad_k,
        contributing_anchors=cross.contributing_anchors + intra.contributing_anchors,
    )
