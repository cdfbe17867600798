"""Training losses with analytic gradients, plus the running class-center update.

The combined objective for the refinement head is

    L = L_cls + lambda * L_reg + mu * L_center

where L_cls is mean softmax cross-entropy over the mini-batch, L_reg is
SmoothL1 over positive samples, and L_center = 0.5 * sum_i ||x_i - c_{y_i}||^2
penalizes each feature's distance to its class centroid. Note the center term
is a *sum* over the batch while cross-entropy is a mean; ``mu`` absorbs the
scale difference (do not re-normalize).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Centers",
    "LossReport",
    "LossWeights",
    "MultitaskGrads",
    "center_loss",
    "multitask_loss",
    "smooth_l1",
    "softmax_ce",
    "update_centers",
]

NUM_CLASSES = 2  # face / non-face


@dataclass(eq=False)
class Centers:
    """Per-class feature centroids and their mini-batch learning rate."""

    values: np.ndarray  # (NUM_CLASSES, feature_dim)
    alpha: float = 0.5

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != NUM_CLASSES:
            raise ValueError(
                f"centers must have shape ({NUM_CLASSES}, feature_dim), got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite center values")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"center alpha must lie in (0, 1], got {self.alpha}")

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def zeros(feature_dim: int, alpha: float = 0.5) -> "Centers":
        return Centers(np.zeros((NUM_CLASSES, feature_dim)), alpha)


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights: ``lam`` for regression, ``mu`` for the center term."""

    lam: float = 1.0
    mu: float = 0.01

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lam) and self.lam >= 0.0):
            raise ValueError(f"lam must be finite and non-negative, got {self.lam}")
        if not (np.isfinite(self.mu) and self.mu >= 0.0):
            raise ValueError(f"mu must be finite and non-negative, got {self.mu}")


@dataclass(frozen=True)
class LossReport:
    """Decomposed loss values; ``total = cls + lam*reg + mu*center``."""

    cls: float
    reg: float
    center: float
    total: float
    per_sample_cls: np.ndarray


@dataclass(frozen=True)
class MultitaskGrads:
    """Partials of the combined loss w.r.t. each head output.

    ``features`` holds only the direct center-term partial mu * (x - c); the
    classification path reaches the features through ``logits`` during network
    backprop.
    """

    logits: np.ndarray
    deltas: np.ndarray
    features: np.ndarray


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")


def _check_labels(labels: np.ndarray, m: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise ValueError(f"labels must have shape ({m},), got {labels.shape}")
    labels = labels.astype(np.int64)
    if np.any((labels < 0) | (labels >= NUM_CLASSES)):
        raise ValueError("labels must be 0 or 1")
    return labels


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy over a 2-class batch.

    Returns (loss, per_sample, grad_logits) where per_sample holds each row's
    unreduced negative log-likelihood and grad_logits = (softmax - onehot) / m.
    Log-sum-exp stabilized; invariant to per-row logit shifts.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != NUM_CLASSES:
        raise ValueError(f"logits must have shape (m, {NUM_CLASSES}), got {logits.shape}")
    m = logits.shape[0]
    if m < 1:
        raise ValueError("empty logits batch")
    _check_finite("logits", logits)
    labels = _check_labels(labels, m)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    per_sample = -log_probs[np.arange(m), labels]
    probs = np.exp(log_probs)
    onehot = np.zeros_like(probs)
    onehot[np.arange(m), labels] = 1.0
    grad = (probs - onehot) / m
    return float(per_sample.mean()), per_sample, grad


def center_loss(
    features: np.ndarray, labels: np.ndarray, centers: Centers
) -> tuple[float, np.ndarray]:
    """0.5 * sum_i ||x_i - c_{y_i}||^2 with gradient rows (x_i - c_{y_i}).

    The sum runs over the mini-batch (no mean). Centers are constants for
    this gradient; their own update happens in :func:`update_centers`.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {features.shape}")
    if features.shape[1] != centers.feature_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} != centers dim {centers.feature_dim}"
        )
    _check_finite("features", features)
    labels = _check_labels(labels, features.shape[0])
    diff = features - centers.values[labels]
    loss = 0.5 * float((diff * diff).sum())
    return loss, diff


def update_centers(centers: Centers, features: np.ndarray, labels: np.ndarray) -> Centers:
    """Mini-batch center update.

    For each class j present in the batch:
        delta_j = sum_{i: y_i = j} (c_j - x_i) / (1 + n_j)
        c_j <- c_j - alpha * delta_j
    Absent classes are untouched. Returns a new Centers value.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != centers.feature_dim:
        raise ValueError(
            f"features must have shape (m, {centers.feature_dim}), got {features.shape}"
        )
    _check_finite("features", features)
    labels = _check_labels(labels, features.shape[0])
    values = centers.values.copy()
    for j in range(NUM_CLASSES):
        mask = labels == j
        n = int(mask.sum())
        if n == 0:
            continue
        delta = (values[j] - features[mask]).sum(axis=0) / (1.0 + n)
        values[j] = values[j] - centers.alpha * delta
    return Centers(values, centers.alpha)


def smooth_l1(
    pred: np.ndarray, target: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """SmoothL1 regression loss over mask-selected rows.

    Elementwise f(x) = 0.5 x^2 for |x| < 1 else |x| - 0.5 on (pred - target),
    summed over rows with mask == 1 and divided by max(1, sum(mask)). The
    gradient is x inside the quadratic zone and sign(x) outside, scaled by the
    same normalizer; unmasked rows get zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"pred/target shape mismatch: {pred.shape} vs {target.shape}")
    _check_finite("pred", pred)
    _check_finite("target", target)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (pred.shape[0],):
        raise ValueError(f"mask must have shape ({pred.shape[0]},), got {mask.shape}")
    if np.any((mask != 0.0) & (mask != 1.0)):
        raise ValueError("mask entries must be 0 or 1")

    r = pred - target
    a = np.abs(r)
    quad = a < 1.0
    elementwise = np.where(quad, 0.5 * r * r, a - 0.5)
    denom = max(1.0, float(mask.sum()))
    loss = float((elementwise * mask[:, None]).sum()) / denom
    grad = np.where(quad, r, np.sign(r)) * (mask[:, None] / denom)
    return loss, grad


def multitask_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    pred_deltas: np.ndarray,
    target_deltas: np.ndarray,
    pos_mask: np.ndarray,
    features: np.ndarray,
    centers: Centers,
    weights: LossWeights,
) -> tuple[LossReport, MultitaskGrads]:
    """Combined classification + regression + center objective for one batch."""
    m = np.asarray(logits).shape[0]
    for name, arr in (("pred_deltas", pred_deltas), ("features", features)):
        if np.asarray(arr).shape[0] != m:
            raise ValueError(f"{name} batch dim != {m}")
    cls, per_sample, grad_logits = softmax_ce(logits, labels)
    reg, grad_deltas = smooth_l1(pred_deltas, target_deltas, pos_mask)
    cent, grad_feat = center_loss(features, labels, centers)
    total = cls + weights.lam * reg + weights.mu * cent
    report = LossReport(cls=cls, reg=reg, center=cent, total=total, per_sample_cls=per_sample)
    grads = MultitaskGrads(
        logits=grad_logits,
        deltas=weights.lam * grad_deltas,
        features=weights.mu * grad_feat,
    )
    return report, grads
