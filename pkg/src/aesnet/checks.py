"""The gradient-check suite: every differentiable block probed against
central finite differences over many seeds.

Step sizes are chosen per block from float64 error analysis.  Primitive
blocks run at the default eps=1e-6.  Multi-stage composites (the
dual-branch feature head, channel attention, the end-to-end miniature)
run at eps=1e-5: the probe loss carries quantization noise of about
ulp(loss)/(2*eps), which at 1e-6 can reach 1e-5 relative error on
small-gradient entries even though the analytic gradients are exact; the
measured error falls as eps grows, the signature of roundoff rather than
a wrong gradient.  The batch ranking loss is piecewise linear, so its
central differences are truncation-free at any kink-safe step; it runs
at eps=5e-3 with batches resampled until every hinge and |.| kink is at
least 5*eps away.

The end-to-end miniature cannot reach the 1e-5 bound at any eps: it
always owns parameters whose true gradient is ~1e-8..1e-6 (products of
near-zero pooled features), and certifying those against the 1e-8
denominator floor would need ~1e-13 absolute resolution, below the
quantization floor of every kink-safe step.  Its analytic gradients are
verified instead by an entrywise atol+rtol comparison in the test suite;
the strict worst-relative-error number is still reported here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    Block,
    Conv2d,
    Linear,
    Mlp,
    Project1x1,
    Sigmoid,
    Softmax,
    SpatialPool,
    finite_diff_check,
)
from .losses import SortedBatch, emd_loss, mse_loss, relative_relation_loss
from .model import (
    AapBlock,
    AestheticNet,
    AttributeGate,
    BilinearHead,
    ChannelAttention,
    ModelConfig,
)

TOLERANCE = 1e-5
DEFAULT_SEEDS = 50


class _LossBlock(Block):
    """Adapter exposing a (value, grad) loss function as a scalar block."""

    def __init__(self, fn):
        super().__init__()
        self._fn = fn

    def forward(self, inputs):
        (p,) = inputs
        value, grad = self._fn(p)
        self._stack.append(grad)
        return [np.asarray(value)]

    def backward(self, upstream):
        (dy,) = upstream
        return [float(dy) * self._stack.pop()]


class _EmdChain(Block):
    """Softmax of logits into the cumulative-distribution loss, so the
    distribution head's gradient path is probed with a non-constant loss."""

    def __init__(self, target):
        super().__init__()
        self.softmax = Softmax()
        self.target = target

    def sub_blocks(self):
        yield "softmax", self.softmax

    def forward(self, inputs):
        (logits,) = inputs
        dist = self.softmax(logits)
        value, grad = emd_loss(dist, self.target)
        self._stack.append(grad)
        return [np.asarray(value)]

    def backward(self, upstream):
        (dy,) = upstream
        return self.softmax.backward([float(dy) * self._stack.pop()])


_RELATIVE_EPS = 5e-3  # the loss is piecewise linear, so central differences
# are truncation-free at any kink-safe eps; this large step keeps the probe's
# ulp quantization noise ~4e-14, far below the 1e-8 denominator floor.
_KINK_MARGIN = 5 * _RELATIVE_EPS


def _relative_batch(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw (p, g) with every hinge and |.| kink well clear of the probe
    step, so finite differences never straddle a subgradient discontinuity."""
    while True:
        g = np.sort(rng.uniform(1, 10, size))[::-1].copy()
        p = rng.uniform(1, 10, size)
        ok = True
        for i in range(3, size - 1):
            for j, k in [(j, j - 1) for j in range(2, i)] + [(j, j + 1) for j in range(i + 1, size)]:
                t = abs(p[i - 1] - p[j - 1]) - abs(p[i - 1] - p[k - 1]) + abs(g[j - 1] - g[k - 1])
                if min(abs(t), abs(p[i - 1] - p[j - 1]), abs(p[i - 1] - p[k - 1])) < _KINK_MARGIN:
                    ok = False
        if ok:
            return p, g


def _miniature_config(seed: int, mode: str) -> ModelConfig:
    return ModelConfig(attributes=("composition", "color"), mode=mode, channels=4,
                       input_size=8, stem_channels=(2, 3), init_seed=seed)


class _ScoredModel(Block):
    """Miniature net composed with the supervision loss (distribution mode)."""

    def __init__(self, seed: int):
        super().__init__()
        self.net = AestheticNet(_miniature_config(seed, "distribution"))
        rng = np.random.default_rng(seed + 1000)
        raw = rng.uniform(0.5, 1.5, self.net.cfg.buckets)
        self.target = raw / raw.sum()

    def sub_blocks(self):
        yield "net", self.net

    def forward(self, inputs):
        dist = self.net.forward(inputs)[0]
        value, grad = emd_loss(dist, self.target)
        self._stack.append(grad)
        return [np.asarray(value)]

    def backward(self, upstream):
        (dy,) = upstream
        return self.net.backward([float(dy) * self._stack.pop()])


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    eps: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.worst <= TOLERANCE


def _cases():
    """(name, eps, builder) where builder(seed) -> (block, inputs)."""

    def with_rng(make):
        def build(seed):
            rng = np.random.default_rng(seed)
            return make(rng)
        return build

    return [
        ("linear", 1e-6, with_rng(
            lambda rng: (Linear(4, 3, rng), [rng.normal(size=4)]))),
        ("sigmoid", 1e-6, with_rng(
            lambda rng: (Sigmoid(), [rng.normal(size=6)]))),
        ("mlp", 1e-6, with_rng(
            lambda rng: (Mlp(5, 4, 3, rng), [rng.normal(size=5)]))),
        ("conv_3x3", 1e-6, with_rng(
            lambda rng: (Conv2d(3, 2, 3, stride=1, padding=1, rng=rng),
                         [rng.normal(size=(3, 4, 4))]))),
        ("project_1x1", 1e-6, with_rng(
            lambda rng: (Project1x1(3, 2, rng), [rng.normal(size=(3, 3, 3))]))),
        ("spatial_pool_avg", 1e-6, with_rng(
            lambda rng: (SpatialPool("avg"), [rng.normal(size=(3, 3, 3))]))),
        ("spatial_pool_max", 1e-6, with_rng(
            lambda rng: (SpatialPool("max"), [rng.normal(size=(3, 3, 3))]))),
        ("aap_full", 1e-5, with_rng(
            lambda rng: (AapBlock(8, 4, "full", rng), [rng.normal(size=(8, 4, 4))]))),
        ("aap_no_cnn", 1e-5, with_rng(
            lambda rng: (AapBlock(8, 4, "no_cnn", rng), [rng.normal(size=(8, 4, 4))]))),
        ("aap_no_pool", 1e-5, with_rng(
            lambda rng: (AapBlock(8, 4, "no_pool", rng), [rng.normal(size=(8, 4, 4))]))),
        ("channel_attention", 1e-5, with_rng(
            lambda rng: (ChannelAttention(10, 4, rng), [rng.normal(size=(10, 3, 3))]))),
        ("gate_attribute", 1e-6, with_rng(
            lambda rng: (AttributeGate(4, 10, 4, rng),
                         [rng.normal(size=4), rng.normal(size=10)]))),
        ("bilinear_fuse", 1e-6, with_rng(
            lambda rng: (BilinearHead(5, 3, 2, rng),
                         [rng.normal(size=5), rng.normal(size=3)]))),
        ("mse", 1e-6, with_rng(
            lambda rng: (_LossBlock(lambda p, g=rng.normal(size=6): mse_loss(p, g)),
                         [rng.normal(size=6)]))),
        ("emd_softmax", 1e-6, with_rng(
            lambda rng: (_EmdChain(np.full(10, 0.1)), [rng.normal(size=10)]))),
        ("relative_relation", _RELATIVE_EPS, _relative_case),
        ("model_miniature_score", 1e-5, _model_case),
    ]


def _relative_case(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(5, 11))
    p, g = _relative_batch(rng, size)

    def loss(p_vec):
        return relative_relation_loss(SortedBatch(g=g, p=p_vec))

    return _LossBlock(loss), [p]


def _model_case(seed):
    rng = np.random.default_rng(seed)
    net = AestheticNet(_miniature_config(seed, "score"))
    return net, [rng.normal(size=(3, 8, 8))]


def gradcheck_suite(seeds: int = DEFAULT_SEEDS) -> list[CheckResult]:
    """Run every case over ``seeds`` seeds; returns the worst error each."""
    results = []
    for name, eps, build in _cases():
        worst = 0.0
        for seed in range(seeds):
            block, inputs = build(seed)
            worst = max(worst, finite_diff_check(block, inputs, eps=eps))
        results.append(CheckResult(name, worst, eps, seeds))
    return results
