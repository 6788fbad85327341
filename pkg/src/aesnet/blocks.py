"""Differentiable numeric blocks with hand-derived gradients.

Every block follows one contract: ``forward`` takes a list of float64
arrays and pushes whatever the matching ``backward`` needs onto an
internal stack; ``backward`` consumes upstream gradients, returns input
gradients and accumulates parameter gradients in place.  The stack is
strictly LIFO, so one block instance may appear several times inside a
computation (e.g. once per sample of a batch) as long as backward calls
happen in reverse order of the forwards.

``finite_diff_check`` probes any block against central finite
differences of a sum-of-outputs loss; it is the oracle the rest of the
library is validated against.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from typing import Literal

import numpy as np

Tensor = np.ndarray

PoolMode = Literal["avg", "max"]


class ShapeError(ValueError):
    """Operand shapes do not conform; the message names the operands."""


class NumericsError(ArithmeticError):
    """A forward pass produced a non-finite value."""


class GradientCheckError(RuntimeError):
    """finite_diff_check hit a non-finite probe value."""


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def require_finite(label: str, arr: Tensor) -> Tensor:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(arr)))[0])
        raise NumericsError(f"{label}: non-finite value at flat index {bad}")
    return arr


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def mlp_hidden_width(channels: int, reduction: int = 16) -> int:
    """Hidden width used by every small MLP: max(ceil(C / reduction), 4)."""
    return max(math.ceil(channels / reduction), 4)


# ---------------------------------------------------------------------------
# pure kernels
# ---------------------------------------------------------------------------

def linear_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """W @ x + b for a single vector or a (batch, n) stack of vectors."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"linear_forward: x{x.shape} incompatible with W{W.shape}, b{b.shape}"
        )
    return x @ W.T + b


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, stable for large |x|."""
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    return np.maximum(as_tensor(x), 0.0)


def mlp_forward(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer perceptron kernel: linear -> relu -> linear."""
    return linear_forward(relu(linear_forward(x, W1, b1)), W2, b2)


def spatial_pool(fmap: Tensor, mode: PoolMode) -> Tensor:
    """Reduce a (C, H, W) map to one value per channel."""
    fmap = as_tensor(fmap)
    if fmap.ndim != 3 or fmap.shape[1] * fmap.shape[2] == 0:
        raise ShapeError(f"spatial_pool: expected non-empty (C, H, W) map, got {fmap.shape}")
    if mode == "avg":
        return fmap.mean(axis=(1, 2))
    if mode == "max":
        return fmap.reshape(fmap.shape[0], -1).max(axis=1)
    raise ValueError(f"spatial_pool: unknown mode {mode!r}")


def concat_channels(maps: Sequence[Tensor]) -> tuple[Tensor, list[tuple[int, int]]]:
    """Stack maps along the channel axis; returns the map and per-input
    (start, stop) channel offsets."""
    maps = [as_tensor(m) for m in maps]
    if not maps:
        raise ShapeError("concat_channels: no inputs")
    hw = maps[0].shape[1:]
    for i, m in enumerate(maps):
        if m.ndim != 3 or m.shape[1:] != hw:
            raise ShapeError(
                f"concat_channels: input {i} has spatial dims {m.shape[1:]}, expected {hw}"
            )
    offsets = []
    start = 0
    for m in maps:
        offsets.append((start, start + m.shape[0]))
        start += m.shape[0]
    return np.concatenate(maps, axis=0), offsets


def project_1x1(fmap: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-pixel channel remap of a (C, H, W) map; spatial dims unchanged."""
    fmap, W, b = as_tensor(fmap), as_tensor(W), as_tensor(b)
    if fmap.ndim != 3 or W.ndim != 2 or W.shape[1] != fmap.shape[0] or b.shape != (W.shape[0],):
        raise ShapeError(f"project_1x1: map{fmap.shape} incompatible with W{W.shape}, b{b.shape}")
    c, h, w = fmap.shape
    out = W @ fmap.reshape(c, h * w) + b[:, None]
    return out.reshape(W.shape[0], h, w)


# ---------------------------------------------------------------------------
# block infrastructure
# ---------------------------------------------------------------------------


class BlockParams:
    """Named parameter arrays plus same-shape gradient accumulators."""

    def __init__(self) -> None:
        self.entries: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.entries[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def set(self, name: str, value) -> None:
        """Overwrite a parameter in place (shape must match)."""
        arr = self.entries[name]
        value = as_tensor(value)
        if value.shape != arr.shape:
            raise ShapeError(f"parameter {name!r} has shape {arr.shape}, got {value.shape}")
        arr[...] = value

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


class Block:
    """Base class for one differentiable unit.

    Subclasses implement ``forward``/``backward`` over lists of arrays.
    ``backward`` must be called once per ``forward`` in reverse order.
    """

    def __init__(self) -> None:
        self.params = BlockParams()
        self._stack: list = []

    def sub_blocks(self) -> Iterator[tuple[str, "Block"]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, Tensor]]:
        for name in self.params.entries:
            yield prefix + name, self.params.entries[name], self.params.grads[name]
        for child_name, child in self.sub_blocks():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def zero_grads(self) -> None:
        self.params.zero_grads()
        for _, child in self.sub_blocks():
            child.zero_grads()

    def clear_cache(self) -> None:
        self._stack.clear()
        for _, child in self.sub_blocks():
            child.clear_cache()

    def forward(self, inputs: Sequence[Tensor]) -> list[Tensor]:
        raise NotImplementedError

    def backward(self, upstream: Sequence[Tensor]) -> list[Tensor]:
        raise NotImplementedError

    def __call__(self, *arrays: Tensor):
        outs = self.forward(list(arrays))
        return outs[0] if len(outs) == 1 else tuple(outs)


class Linear(Block):
    """Affine map W x + b; accepts (n,) vectors or (batch, n) stacks."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.W = self.params.add("W", glorot_uniform(rng, (n_out, n_in), n_in, n_out))
        self.b = self.params.add("b", np.zeros(n_out))

    def forward(self, inputs):
        (x,) = inputs
        y = linear_forward(x, self.W, self.b)
        self._stack.append(x)
        return [y]

    def backward(self, upstream):
        (dy,) = upstream
        x = self._stack.pop()
        if x.ndim == 1:
            self.params.grads["W"] += np.outer(dy, x)
            self.params.grads["b"] += dy
        else:
            self.params.grads["W"] += dy.T @ x
            self.params.grads["b"] += dy.sum(axis=0)
        return [dy @ self.W]


class Sigmoid(Block):
    def forward(self, inputs):
        (x,) = inputs
        y = sigmoid(x)
        self._stack.append(y)
        return [y]

    def backward(self, upstream):
        (dy,) = upstream
        y = self._stack.pop()
        return [dy * y * (1.0 - y)]


class Relu(Block):
    """max(0, x); subgradient at 0 is 0."""

    def forward(self, inputs):
        (x,) = inputs
        self._stack.append(x > 0)
        return [np.maximum(x, 0.0)]

    def backward(self, upstream):
        (dy,) = upstream
        mask = self._stack.pop()
        return [dy * mask]


class Mlp(Block):
    """linear -> relu -> linear."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.act = Relu()
        self.fc2 = Linear(n_hidden, n_out, rng)

    def sub_blocks(self):
        yield "fc1", self.fc1
        yield "act", self.act
        yield "fc2", self.fc2

    def forward(self, inputs):
        (x,) = inputs
        return [self.fc2(self.act(self.fc1(x)))]

    def backward(self, upstream):
        (dy,) = upstream
        dh = self.fc2.backward([dy])[0]
        dh = self.act.backward([dh])[0]
        return self.fc1.backward([dh])


class Conv2d(Block):
    """Square-kernel convolution on a single (C, H, W) map with zero padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0, *, rng: np.random.Generator) -> None:
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.W = self.params.add("W", glorot_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, fan_out))
        self.b = self.params.add("b", np.zeros(c_out))

    def _cols(self, xp: Tensor, h_out: int, w_out: int) -> Tensor:
        c, k, s = self.c_in, self.kernel, self.stride
        cols = np.empty((c, k, k, h_out, w_out))
        for di in range(k):
            for dj in range(k):
                cols[:, di, dj] = xp[:, di:di + s * h_out:s, dj:dj + s * w_out:s]
        return cols.reshape(c * k * k, h_out * w_out)

    def forward(self, inputs):
        (x,) = inputs
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with {self.c_in} input channels")
        k, s, p = self.kernel, self.stride, self.padding
        h, w = x.shape[1:]
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"conv2d: map {x.shape} smaller than kernel {k}")
        if p:
            xp = np.zeros((self.c_in, h + 2 * p, w + 2 * p))
            xp[:, p:p + h, p:p + w] = x
        else:
            xp = x
        h_out = (h + 2 * p - k) // s + 1
        w_out = (w + 2 * p - k) // s + 1
        cols = self._cols(xp, h_out, w_out)
        y = self.W.reshape(self.c_out, -1) @ cols + self.b[:, None]
        self._stack.append((cols, x.shape, h_out, w_out))
        return [y.reshape(self.c_out, h_out, w_out)]

    def backward(self, upstream):
        (dy,) = upstream
        cols, x_shape, h_out, w_out = self._stack.pop()
        k, s, p = self.kernel, self.stride, self.padding
        dy_mat = dy.reshape(self.c_out, -1)
        self.params.grads["W"] += (dy_mat @ cols.T).reshape(self.W.shape)
        self.params.grads["b"] += dy_mat.sum(axis=1)
        dcols = (self.W.reshape(self.c_out, -1).T @ dy_mat).reshape(self.c_in, k, k, h_out, w_out)
        h, w = x_shape[1:]
        dxp = np.zeros((self.c_in, h + 2 * p, w + 2 * p))
        for di in range(k):
            for dj in range(k):
                dxp[:, di:di + s * h_out:s, dj:dj + s * w_out:s] += dcols[:, di, dj]
        dx = dxp[:, p:p + h, p:p + w] if p else dxp
        return [dx]


class Project1x1(Block):
    """1x1-kernel channel projection of a (C, H, W) map."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.W = self.params.add("W", glorot_uniform(rng, (c_out, c_in), c_in, c_out))
        self.b = self.params.add("b", np.zeros(c_out))

    def forward(self, inputs):
        (x,) = inputs
        y = project_1x1(x, self.W, self.b)
        self._stack.append(x)
        return [y]

    def backward(self, upstream):
        (dy,) = upstream
        x = self._stack.pop()
        c, h, w = x.shape
        dy_mat = dy.reshape(self.c_out, h * w)
        self.params.grads["W"] += dy_mat @ x.reshape(c, h * w).T
        self.params.grads["b"] += dy_mat.sum(axis=1)
        return [(self.W.T @ dy_mat).reshape(c, h, w)]


class SpatialPool(Block):
    """Global per-channel avg or max pooling: (C, H, W) -> (C,).

    Max routes the full gradient to the first argmax position in
    row-major order, which makes tie handling deterministic.
    """

    def __init__(self, mode: PoolMode) -> None:
        super().__init__()
        if mode not in ("avg", "max"):
            raise ValueError(f"spatial_pool: unknown mode {mode!r}")
        self.mode = mode

    def forward(self, inputs):
        (x,) = inputs
        y = spatial_pool(x, self.mode)
        if self.mode == "avg":
            self._stack.append(("avg", x.shape))
        else:
            idx = x.reshape(x.shape[0], -1).argmax(axis=1)
            self._stack.append(("max", x.shape, idx))
        return [y]

    def backward(self, upstream):
        (dy,) = upstream
        frame = self._stack.pop()
        if frame[0] == "avg":
            _, shape = frame
            scale = 1.0 / (shape[1] * shape[2])
            return [np.broadcast_to((dy * scale)[:, None, None], shape).copy()]
        _, shape, idx = frame
        dx = np.zeros((shape[0], shape[1] * shape[2]))
        dx[np.arange(shape[0]), idx] = dy
        return [dx.reshape(shape)]


class WindowPool2x2(Block):
    """Non-overlapping 2x2 avg or max pooling; spatial dims must be even."""

    def __init__(self, mode: PoolMode) -> None:
        super().__init__()
        if mode not in ("avg", "max"):
            raise ValueError(f"window pool: unknown mode {mode!r}")
        self.mode = mode

    def forward(self, inputs):
        (x,) = inputs
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"window pool: spatial dims of {x.shape} must be even")
        windows = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
        if self.mode == "avg":
            self._stack.append(("avg", x.shape))
            return [windows.mean(axis=3)]
        idx = windows.argmax(axis=3)  # first max within each window, row-major
        self._stack.append(("max", x.shape, idx))
        return [windows.max(axis=3)]

    def backward(self, upstream):
        (dy,) = upstream
        frame = self._stack.pop()
        if frame[0] == "avg":
            _, (c, h, w) = frame
            dwin = np.broadcast_to((dy * 0.25)[..., None], (c, h // 2, w // 2, 4)).copy()
        else:
            _, (c, h, w), idx = frame
            dwin = np.zeros((c, h // 2, w // 2, 4))
            np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=3)
        return [dwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)]


class NearestUpsample2x(Block):
    """Nearest-neighbour 2x spatial upsampling of a (C, H, W) map."""

    def forward(self, inputs):
        (x,) = inputs
        self._stack.append(x.shape)
        return [np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)]

    def backward(self, upstream):
        (dy,) = upstream
        c, h, w = self._stack.pop()
        return [dy.reshape(c, h, 2, w, 2).sum(axis=(2, 4))]


class ConcatChannels(Block):
    """Channel-axis concatenation of maps sharing spatial dims."""

    def forward(self, inputs):
        out, offsets = concat_channels(inputs)
        self._stack.append(offsets)
        return [out]

    def backward(self, upstream):
        (dy,) = upstream
        offsets = self._stack.pop()
        return [dy[a:b].copy() for a, b in offsets]


class Softmax(Block):
    """Softmax over a vector of logits."""

    def forward(self, inputs):
        (x,) = inputs
        z = x - x.max()
        e = np.exp(z)
        y = e / e.sum()
        self._stack.append(y)
        return [y]

    def backward(self, upstream):
        (dy,) = upstream
        y = self._stack.pop()
        return [y * (dy - float(np.dot(y, dy)))]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(block: Block, inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between analytic gradients and central finite
    differences of sum-of-outputs, over every input and parameter entry.

    The relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator.  Raises GradientCheckError on non-finite outputs.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    block.clear_cache()
    block.zero_grads()

    outs = block.forward(inputs)
    for oi, out in enumerate(outs):
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.isfinite(np.ravel(out)))[0])
            raise GradientCheckError(f"output {oi} is non-finite at flat index {bad}")
    in_grads = block.backward([np.ones_like(o) for o in outs])

    def probe() -> float:
        try:
            result = math.fsum(float(np.sum(o)) for o in block.forward(inputs))
        finally:
            block.clear_cache()
        if not math.isfinite(result):
            raise GradientCheckError("probe produced a non-finite output sum")
        return result

    worst = 0.0

    def sweep(arr: Tensor, grad: Tensor) -> None:
        nonlocal worst
        for k in range(arr.size):
            orig = arr.flat[k]
            arr.flat[k] = orig + eps
            f_plus = probe()
            arr.flat[k] = orig - eps
            f_minus = probe()
            arr.flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(grad.flat[k])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)

    for x, gx in zip(inputs, in_grads):
        sweep(x, gx)
    for _, arr, grad in block.named_parameters():
        sweep(arr, grad)
    block.zero_grads()
    return worst
