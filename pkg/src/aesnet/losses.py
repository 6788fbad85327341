"""Training objectives: MSE, cumulative-distribution (earth mover's)
distance, margin triplets and the batch-level relative-relation loss.

All functions return the loss value together with exact gradients with
respect to the predictions.  Subgradient conventions: the hinge is
inactive at exactly 0 and d|x|/dx = 0 at x = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import ShapeError, as_tensor


@dataclass(frozen=True)
class LossConfig:
    """Supervision mode plus the weights of the combined objective.

    ``relative_weight`` is the balancing coefficient of the relative
    term (serialized under the key "lambda").
    """

    mode: str = "score"  # "score" | "distribution"
    relative_weight: float = 0.05
    emd_exponent: float = 2.0
    buckets: int = 10

    def __post_init__(self) -> None:
        if self.mode not in ("score", "distribution"):
            raise ValueError(f"unknown supervision mode {self.mode!r}")
        if not np.isfinite(self.relative_weight) or self.relative_weight < 0:
            raise ValueError("relative_weight must be finite and >= 0")
        if self.buckets < 2:
            raise ValueError("buckets must be >= 2")
        if self.emd_exponent < 1:
            raise ValueError("emd_exponent must be >= 1")


@dataclass
class SortedBatch:
    """Samples of one batch ordered by ground truth, largest first.

    ``items`` carries opaque per-sample payloads in the same order.
    ``p`` is filled by the caller once predictions exist.  Batches
    shorter than five samples are flagged ``relative_exempt`` so the
    harness can drop the relative term instead of erroring.
    """

    g: np.ndarray
    p: np.ndarray | None = None
    items: list = field(default_factory=list)
    relative_exempt: bool = False

    def __post_init__(self) -> None:
        self.g = as_tensor(self.g)
        if self.g.ndim != 1 or self.g.size == 0:
            raise ShapeError(f"SortedBatch: g must be a non-empty vector, got {self.g.shape}")
        if np.any(np.diff(self.g) > 0):
            raise ValueError("SortedBatch: ground truth must be non-increasing")

    @property
    def size(self) -> int:
        return int(self.g.size)


def mse_loss(p, g) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient 2(p - g)/n."""
    p, g = as_tensor(p), as_tensor(g)
    if p.shape != g.shape or p.ndim != 1 or p.size == 0:
        raise ShapeError(f"mse_loss: p{p.shape} vs g{g.shape}")
    diff = p - g
    return float(np.mean(diff * diff)), 2.0 * diff / p.size


def _check_distribution(name: str, d: np.ndarray, buckets: int) -> None:
    if d.shape != (buckets,):
        raise ShapeError(f"emd_loss: {name} has shape {d.shape}, expected ({buckets},)")
    if np.any(d < 0):
        raise ValueError(f"emd_loss: {name} has negative entries")
    if abs(float(d.sum()) - 1.0) > 1e-6:
        raise ValueError(f"emd_loss: {name} sums to {float(d.sum()):.9f}, expected 1")


def emd_loss(p_dist, g_dist, exponent: float = 2.0) -> tuple[float, np.ndarray]:
    """Distance between cumulative score distributions:
    ((1/B) sum_k |CDF_p(k) - CDF_g(k)|^r)^(1/r), with gradient wrt p_dist.
    """
    p_dist, g_dist = as_tensor(p_dist), as_tensor(g_dist)
    if p_dist.shape != g_dist.shape or p_dist.ndim != 1:
        raise ShapeError(f"emd_loss: p{p_dist.shape} vs g{g_dist.shape}")
    buckets = p_dist.size
    _check_distribution("p_dist", p_dist, buckets)
    _check_distribution("g_dist", g_dist, buckets)
    r = float(exponent)
    diff = np.cumsum(p_dist) - np.cumsum(g_dist)
    inner = float(np.mean(np.abs(diff) ** r))
    value = inner ** (1.0 / r)
    if inner == 0.0:
        return 0.0, np.zeros(buckets)
    # dL/ddiff_k, then chain through the CDF: dL/dp_j = sum_{k >= j} dL/ddiff_k
    ddiff = (inner ** (1.0 / r - 1.0)) * (np.abs(diff) ** (r - 1.0)) * np.sign(diff) / buckets
    grad = np.cumsum(ddiff[::-1])[::-1]
    return value, grad


def triplet_relative(p_i: float, p_j: float, p_k: float,
                     g_j: float, g_k: float) -> tuple[float, tuple[float, float, float]]:
    """max(0, |p_i - p_j| - |p_i - p_k| + |g_j - g_k|) with subgradients
    wrt (p_i, p_j, p_k)."""
    a = p_i - p_j
    c = p_i - p_k
    t = abs(a) - abs(c) + abs(g_j - g_k)
    if t <= 0.0:
        return 0.0, (0.0, 0.0, 0.0)
    sa, sc = float(np.sign(a)), float(np.sign(c))
    return t, (sa - sc, -sa, sc)


def relative_relation_loss(batch: SortedBatch) -> tuple[float, np.ndarray]:
    """Batch ranking loss: every interior sample anchors margin triplets
    against its neighbours on both sides,

        L = 1/(b-4) * sum_{i=3}^{b-2} 1/(b-3) *
            ( sum_{j=2}^{i-1} T(i, j, j-1) + sum_{j=i+1}^{b-1} T(i, j, j+1) )

    with 1-based positions into the descending-sorted batch.  Returns the
    loss and its gradient wrt the prediction vector.
    """
    b = batch.size
    if b < 5:
        raise ValueError(f"relative loss requires batch size >= 5, got {b}")
    if batch.p is None:
        raise ValueError("relative loss requires predictions (batch.p)")
    p = as_tensor(batch.p)
    g = batch.g
    if p.shape != g.shape:
        raise ShapeError(f"relative loss: p{p.shape} vs g{g.shape}")

    grad = np.zeros(b)
    total = 0.0
    for i in range(3, b - 1):  # 1-based anchor positions 3 .. b-2
        anchor_sum = 0.0
        for j in range(2, i):  # positive j, negative j-1
            t, (di, dj, dk) = triplet_relative(p[i - 1], p[j - 1], p[j - 2], g[j - 1], g[j - 2])
            anchor_sum += t
            grad[i - 1] += di
            grad[j - 1] += dj
            grad[j - 2] += dk
        for j in range(i + 1, b):  # positive j, negative j+1
            t, (di, dj, dk) = triplet_relative(p[i - 1], p[j - 1], p[j], g[j - 1], g[j])
            anchor_sum += t
            grad[i - 1] += di
            grad[j - 1] += dj
            grad[j] += dk
        total += anchor_sum / (b - 3)
    return float(total / (b - 4)), grad / ((b - 4) * (b - 3))


@dataclass(frozen=True)
class LossValue:
    """Combined objective with its parts and the gradient wrt predictions."""

    total: float
    supervision: float
    relative: float
    grad: np.ndarray


def total_loss(predicted, target, batch: SortedBatch, cfg: LossConfig,
               relative_active: bool = True) -> LossValue:
    """Supervision term plus relative_weight times the relative term.

    In score mode ``predicted``/``target`` are (b,) score vectors; in
    distribution mode they are (b, buckets) row-stochastic arrays and the
    relative term acts on the distribution means.  The gradient is taken
    wrt ``predicted`` and has its shape.
    """
    predicted, target = as_tensor(predicted), as_tensor(target)
    use_relative = relative_active and not batch.relative_exempt and cfg.relative_weight > 0

    if cfg.mode == "score":
        if predicted.ndim != 1:
            raise ShapeError(f"total_loss: expected score vector, got {predicted.shape}")
        sup, grad = mse_loss(predicted, target)
        scores = predicted
        score_jac = None
    else:
        if predicted.ndim != 2 or predicted.shape[1] != cfg.buckets:
            raise ShapeError(f"total_loss: expected (b, {cfg.buckets}) distributions, got {predicted.shape}")
        per_sample = [emd_loss(predicted[s], target[s], cfg.emd_exponent) for s in range(predicted.shape[0])]
        sup = float(np.mean([v for v, _ in per_sample]))
        grad = np.stack([dg for _, dg in per_sample]) / predicted.shape[0]
        score_jac = np.arange(1, cfg.buckets + 1, dtype=np.float64)
        scores = predicted @ score_jac

    rel = 0.0
    if use_relative:
        batch.p = scores
        rel, drel = relative_relation_loss(batch)
        if cfg.mode == "score":
            grad = grad + cfg.relative_weight * drel
        else:
            grad = grad + cfg.relative_weight * drel[:, None] * score_jac[None, :]

    return LossValue(float(sup + cfg.relative_weight * rel), float(sup), float(rel), grad)
