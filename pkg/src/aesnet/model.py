"""The attribute-fusion scoring network.

Per input image: a shared convolutional stem feeds one dual-branch
feature head per attribute (plus one for the generic branch); the maps
are projected to a common channel count, concatenated, reweighted by
channel attention, pooled, gated per attribute against the pooled
concatenation, and fused bilinearly with the generic vector into either
a single score or a 10-bucket score distribution.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import (
    Block,
    ConcatChannels,
    Conv2d,
    Linear,
    Mlp,
    NearestUpsample2x,
    Project1x1,
    ShapeError,
    SpatialPool,
    Tensor,
    WindowPool2x2,
    glorot_uniform,
    mlp_hidden_width,
    require_finite,
    sigmoid,
)

ATTRIBUTE_NAMES = ("composition", "color", "exposure", "theme")
GENERIC = "generic"
AAP_VARIANTS = ("full", "no_cnn", "no_pool")
SCORE_LO, SCORE_HI = 1.0, 10.0


class AapBlock(Block):
    """Dual-branch attribute feature head over a (C, H, W) map.

    The conv branch stacks a 3x3 and a 1x1 convolution (dims preserved);
    the pool branch concatenates 2x2 avg- and max-pooled maps, remaps
    them with a 1x1 projection and upsamples back to the input dims.
    "full" concatenates both branches, "no_cnn"/"no_pool" keep one.
    Both branches always own parameters, so the unused branch of a
    variant is dead weight rather than a structural difference.
    """

    def __init__(self, c_in: int, c_out: int, variant: str, rng: np.random.Generator) -> None:
        super().__init__()
        if variant not in AAP_VARIANTS:
            raise ValueError(f"aap_block: unknown variant {variant!r}")
        self.variant = variant
        self.conv3 = Conv2d(c_in, c_out, 3, stride=1, padding=1, rng=rng)
        self.conv1 = Conv2d(c_out, c_out, 1, rng=rng)
        self.avg2 = WindowPool2x2("avg")
        self.max2 = WindowPool2x2("max")
        self.cat_pool = ConcatChannels()
        self.pool_proj = Project1x1(2 * c_in, c_out, rng)
        self.up = NearestUpsample2x()
        self.cat_out = ConcatChannels()
        self.out_channels = 2 * c_out if variant == "full" else c_out

    def sub_blocks(self):
        yield "conv3", self.conv3
        yield "conv1", self.conv1
        yield "avg2", self.avg2
        yield "max2", self.max2
        yield "cat_pool", self.cat_pool
        yield "pool_proj", self.pool_proj
        yield "up", self.up
        yield "cat_out", self.cat_out

    def _conv_branch(self, x: Tensor) -> Tensor:
        return self.conv1(self.conv3(x))

    def _pool_branch(self, x: Tensor) -> Tensor:
        pooled = self.cat_pool(self.avg2(x), self.max2(x))
        return self.up(self.pool_proj(pooled))

    def forward(self, inputs):
        (x,) = inputs
        if self.variant == "no_cnn":
            return [self._pool_branch(x)]
        if self.variant == "no_pool":
            return [self._conv_branch(x)]
        return [self.cat_out(self._conv_branch(x), self._pool_branch(x))]

    def _conv_branch_back(self, dy: Tensor) -> Tensor:
        dh = self.conv1.backward([dy])[0]
        return self.conv3.backward([dh])[0]

    def _pool_branch_back(self, dy: Tensor) -> Tensor:
        dproj = self.up.backward([dy])[0]
        dcat = self.pool_proj.backward([dproj])[0]
        davg, dmax = self.cat_pool.backward([dcat])
        return self.avg2.backward([davg])[0] + self.max2.backward([dmax])[0]

    def backward(self, upstream):
        (dy,) = upstream
        if self.variant == "no_cnn":
            return [self._pool_branch_back(dy)]
        if self.variant == "no_pool":
            return [self._conv_branch_back(dy)]
        dconv, dpool = self.cat_out.backward([dy])
        return [self._pool_branch_back(dpool) + self._conv_branch_back(dconv)]


class Stem(Block):
    """Shared trunk: two stride-2 3x3 convolutions."""

    def __init__(self, c_in: int, c_mid: int, c_out: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv2d(c_in, c_mid, 3, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2d(c_mid, c_out, 3, stride=2, padding=1, rng=rng)
        self.out_channels = c_out

    def sub_blocks(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2

    def forward(self, inputs):
        (x,) = inputs
        return [self.conv2(self.conv1(x))]

    def backward(self, upstream):
        (dy,) = upstream
        dy = self.conv2.backward([dy])[0]
        return self.conv1.backward([dy])


class ChannelAttention(Block):
    """Reweight channels of a map from its pooled context.

    Max- and avg-pooled channel vectors go through one shared MLP; the
    sigmoid of the summed responses scales every channel.  The last
    weight vector is kept on ``last_weights`` for export.
    """

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.channels = channels
        self.pool_max = SpatialPool("max")
        self.pool_avg = SpatialPool("avg")
        self.mlp = Mlp(channels, hidden, channels, rng)
        self.last_weights: Tensor | None = None

    def sub_blocks(self):
        yield "pool_max", self.pool_max
        yield "pool_avg", self.pool_avg
        yield "mlp", self.mlp

    def forward(self, inputs):
        (c,) = inputs
        if c.shape[0] != self.channels:
            raise ShapeError(f"channel_attention: map {c.shape} vs {self.channels} channels")
        stacked = np.stack([self.pool_max(c), self.pool_avg(c)])
        responses = self.mlp(stacked)
        weights = sigmoid(responses[0] + responses[1])
        self._stack.append((c, weights))
        self.last_weights = weights
        return [weights[:, None, None] * c]

    def backward(self, upstream):
        (dh,) = upstream
        c, weights = self._stack.pop()
        dweights = (dh * c).sum(axis=(1, 2))
        dc = dh * weights[:, None, None]
        dsum = dweights * weights * (1.0 - weights)
        dpooled = self.mlp.backward([np.stack([dsum, dsum])])[0]
        dc += self.pool_avg.backward([dpooled[1]])[0]
        dc += self.pool_max.backward([dpooled[0]])[0]
        return [dc]


class AttributeGate(Block):
    """z = sigmoid(MLP(x)) * o, with this attribute's own MLP parameters."""

    def __init__(self, n_in: int, n_out: int, hidden: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.mlp = Mlp(n_in, hidden, n_out, rng)

    def sub_blocks(self):
        yield "mlp", self.mlp

    def forward(self, inputs):
        x, o = inputs
        m = self.mlp(x)
        if m.shape != o.shape:
            raise ShapeError(f"gate_attribute: MLP output {m.shape} vs o {o.shape}")
        gate = sigmoid(m)
        self._stack.append((gate, o))
        return [gate * o]

    def backward(self, upstream):
        (dz,) = upstream
        gate, o = self._stack.pop()
        do = dz * gate
        dm = dz * o * gate * (1.0 - gate)
        dx = self.mlp.backward([dm])[0]
        return [dx, do]


class BilinearHead(Block):
    """units-way bilinear readout: w1.y1 + w2.y2 + y1' W3 y2 + b per unit."""

    def __init__(self, d1: int, d2: int, units: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d1, self.d2, self.units = d1, d2, units
        self.params.add("W1", glorot_uniform(rng, (units, d1), d1, units))
        self.params.add("W2", glorot_uniform(rng, (units, d2), d2, units))
        self.params.add("W3", glorot_uniform(rng, (units, d1, d2), d1 * d2, units))
        self.params.add("b", np.zeros(units))

    def forward(self, inputs):
        y1, y2 = inputs
        if y1.shape != (self.d1,) or y2.shape != (self.d2,):
            raise ShapeError(
                f"bilinear_fuse: y1{y1.shape}, y2{y2.shape} vs dims ({self.d1},), ({self.d2},)"
            )
        e = self.params.entries
        cross = np.outer(y1, y2)
        out = e["W1"] @ y1 + e["W2"] @ y2 + e["W3"].reshape(self.units, -1) @ cross.ravel() + e["b"]
        self._stack.append((y1, y2, cross))
        return [out]

    def backward(self, upstream):
        (dout,) = upstream
        y1, y2, cross = self._stack.pop()
        e, g = self.params.entries, self.params.grads
        g["W1"] += np.outer(dout, y1)
        g["W2"] += np.outer(dout, y2)
        g["W3"] += dout[:, None, None] * cross
        g["b"] += dout
        dy1 = e["W1"].T @ dout + dout @ (e["W3"] @ y2)
        dy2 = e["W2"].T @ dout + dout @ np.tensordot(e["W3"], y1, axes=([1], [0]))
        return [dy1, dy2]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture axes.  Defaults are the desk-scale configuration:
    16x16 inputs, 16 shared channels on a 4x4 grid."""

    attributes: tuple[str, ...] = ATTRIBUTE_NAMES
    mode: str = "score"  # "score" | "distribution"
    buckets: int = 10
    channels: int = 16
    input_size: int = 16
    stem_channels: tuple[int, int] = (8, 16)
    aap_variant: str = "full"
    interaction: bool = True
    gate_includes_generic: bool = True
    mlp_reduction: int = 16
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("score", "distribution"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.aap_variant not in AAP_VARIANTS:
            raise ValueError(f"unknown aap variant {self.aap_variant!r}")
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("attribute names must be unique")
        if GENERIC in self.attributes:
            raise ValueError(f"{GENERIC!r} is reserved for the generic branch")
        if self.interaction and not self.attributes:
            raise ValueError("the interaction network needs at least one attribute")
        if self.input_size % 4 != 0 or self.input_size < 8:
            raise ValueError("input_size must be a multiple of 4 and >= 8")


@dataclass(frozen=True)
class Prediction:
    """Model output: a score in [1, 10] and, in distribution mode, the
    10-bucket distribution whose bucket-index mean the score is."""

    mode: str
    score: float
    distribution: np.ndarray | None = None


class AestheticNet(Block):
    """Full scorer; ``forward``/``backward`` process one image at a time.

    Two fixed coordinate channels are appended to the RGB input so the
    toy extractors can represent position-dependent (composition-style)
    features that pretrained extractors would otherwise supply.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.names = tuple(cfg.attributes) + (GENERIC,)
        self.stem = Stem(5, cfg.stem_channels[0], cfg.stem_channels[1], rng)
        self.extractors = {
            name: AapBlock(self.stem.out_channels, cfg.channels, cfg.aap_variant, rng)
            for name in self.names
        }
        self.projections = {
            name: Project1x1(self.extractors[name].out_channels, cfg.channels, rng)
            for name in self.names
        }
        self.cat = ConcatChannels()
        self.total_channels = len(self.names) * cfg.channels
        self.units = 1 if cfg.mode == "score" else cfg.buckets
        if cfg.interaction:
            self.o_names = self.names if cfg.gate_includes_generic else tuple(cfg.attributes)
            self.o_dim = len(self.o_names) * cfg.channels
            self.attention = ChannelAttention(
                self.total_channels, mlp_hidden_width(self.total_channels, cfg.mlp_reduction), rng)
            self.gates = {
                name: AttributeGate(cfg.channels, self.o_dim,
                                    mlp_hidden_width(cfg.channels, cfg.mlp_reduction), rng)
                for name in cfg.attributes
            }
            self.head = BilinearHead(len(cfg.attributes) * self.o_dim, cfg.channels, self.units, rng)
        else:
            self.head = Linear(self.total_channels, self.units, rng)
        size = cfg.input_size
        cols = (np.arange(size) + 0.5) / size - 0.5
        self._coords = np.stack([
            np.broadcast_to(cols[None, :], (size, size)),
            np.broadcast_to(cols[:, None], (size, size)),
        ])

    def sub_blocks(self):
        yield "stem", self.stem
        for name in self.names:
            yield f"extract.{name}", self.extractors[name]
        for name in self.names:
            yield f"proj.{name}", self.projections[name]
        yield "cat", self.cat
        if self.cfg.interaction:
            yield "attention", self.attention
            for name in self.cfg.attributes:
                yield f"gate.{name}", self.gates[name]
        yield "head", self.head

    def _offset(self, name: str) -> slice:
        i = self.names.index(name)
        return slice(i * self.cfg.channels, (i + 1) * self.cfg.channels)

    def forward(self, inputs):
        (img,) = inputs
        size = self.cfg.input_size
        if img.shape != (3, size, size):
            raise ShapeError(f"model input must be (3, {size}, {size}), got {img.shape}")
        require_finite("model input", img)

        x = np.concatenate([img, self._coords], axis=0)
        trunk = self.stem(x)
        maps = [self.projections[n](self.extractors[n](trunk)) for n in self.names]
        fused = self.cat(*maps)
        require_finite("feature concatenation", fused)

        if not self.cfg.interaction:
            pooled_all = fused.mean(axis=(1, 2))
            raw = self.head(pooled_all)
            out, frame = self._readout(raw)
            frame["hw"] = fused.shape[1:]
            self._stack.append(frame)
            return [out]

        reweighted = self.attention(fused)
        hw = reweighted.shape[1] * reweighted.shape[2]
        pooled = {n: reweighted[self._offset(n)].mean(axis=(1, 2)) for n in self.names}
        o = np.concatenate([pooled[n] for n in self.o_names])
        gated = [self.gates[n](pooled[n], o) for n in self.cfg.attributes]
        y1 = np.concatenate(gated)
        raw = self.head(y1, pooled[GENERIC])
        require_finite("bilinear head", raw)
        out, frame = self._readout(raw)
        frame["hw"] = reweighted.shape[1:]
        frame["hw_count"] = hw
        self._stack.append(frame)
        return [out]

    def _readout(self, raw: Tensor) -> tuple[Tensor, dict]:
        if self.cfg.mode == "score":
            s = sigmoid(raw)
            out = SCORE_LO + (SCORE_HI - SCORE_LO) * s
            return out, {"sig": s}
        z = raw - raw.max()
        e = np.exp(z)
        dist = e / e.sum()
        return dist, {"softmax": dist}

    def backward(self, upstream):
        (dout,) = upstream
        frame = self._stack.pop()
        if "sig" in frame:
            s = frame["sig"]
            draw = dout * (SCORE_HI - SCORE_LO) * s * (1.0 - s)
        else:
            y = frame["softmax"]
            draw = y * (dout - float(np.dot(y, dout)))

        if not self.cfg.interaction:
            dpooled_all = self.head.backward([draw])[0]
            h, w = frame["hw"]
            dfused = np.broadcast_to(dpooled_all[:, None, None] / (h * w),
                                     (self.total_channels, h, w)).copy()
        else:
            dy1, dy2 = self.head.backward([draw])
            chunks = np.split(dy1, len(self.cfg.attributes))
            dpooled = {n: np.zeros(self.cfg.channels) for n in self.names}
            do_total = np.zeros(self.o_dim)
            for name, dz in zip(reversed(self.cfg.attributes), reversed(chunks)):
                dx, do = self.gates[name].backward([dz])
                do_total += do
                dpooled[name] += dx
            for name, do_chunk in zip(self.o_names, np.split(do_total, len(self.o_names))):
                dpooled[name] += do_chunk
            dpooled[GENERIC] += dy2
            h, w = frame["hw"]
            dreweighted = np.empty((self.total_channels, h, w))
            for name in self.names:
                dreweighted[self._offset(name)] = dpooled[name][:, None, None] / frame["hw_count"]
            dfused = self.attention.backward([dreweighted])[0]

        dmaps = self.cat.backward([dfused])
        dtrunk = np.zeros((self.stem.out_channels,) + dmaps[0].shape[1:])
        for name, dmap in zip(reversed(self.names), reversed(dmaps)):
            dext = self.projections[name].backward([dmap])[0]
            dtrunk += self.extractors[name].backward([dext])[0]
        dx = self.stem.backward([dtrunk])[0]
        return [dx[:3]]

    # -- inference helpers --------------------------------------------------

    def predict(self, img: Tensor) -> tuple[Prediction, Tensor | None]:
        """Forward one image without keeping gradient caches.

        Returns the prediction and, when the interaction network is
        active, a copy of the attention weight vector for export."""
        out = self.forward([img])[0]
        self.clear_cache()
        weights = None
        if self.cfg.interaction:
            weights = self.attention.last_weights.copy()
        if self.cfg.mode == "score":
            return Prediction("score", float(out[0])), weights
        score = float(out @ np.arange(1, self.cfg.buckets + 1))
        return Prediction("distribution", score, out), weights

    def state_dict(self) -> dict[str, Tensor]:
        return {name: arr for name, arr, _ in self.named_parameters()}


# ---------------------------------------------------------------------------
# checkpoint + attention export formats
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: AestheticNet, path) -> None:
    """One JSON document mapping parameter names to shape + flat values."""
    doc = {
        name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
        for name, arr, _ in model.named_parameters()
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="ascii")


def load_checkpoint(model: AestheticNet, path) -> None:
    doc = json.loads(Path(path).read_text(encoding="ascii"))
    expected = {name: arr for name, arr, _ in model.named_parameters()}
    missing = sorted(set(expected) - set(doc))
    unexpected = sorted(set(doc) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match model: missing {missing[:4]}, unexpected {unexpected[:4]}")
    for name, arr in expected.items():
        entry = doc[name]
        shape = tuple(entry["shape"])
        if shape != arr.shape:
            raise CheckpointError(
                f"checkpoint parameter {name!r} has shape {shape}, model expects {arr.shape}")
        values = np.asarray(entry["data"], dtype=np.float64)
        if values.size != arr.size:
            raise CheckpointError(
                f"checkpoint parameter {name!r} has {values.size} values, expected {arr.size}")
        arr[...] = values.reshape(shape)


def export_attention_weights(rows, path) -> None:
    """CSV with one row per sample: id followed by the weight vector."""
    rows = list(rows)
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        if rows:
            writer.writerow(["id"] + [f"w{i}" for i in range(len(rows[0][1]))])
        for sample_id, weights in rows:
            writer.writerow([sample_id] + [repr(float(v)) for v in weights])
