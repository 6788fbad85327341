"""Optimizer, schedules, batch construction and the training loop."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import ManifestRecord, split_of
from .losses import LossConfig, SortedBatch, total_loss
from .metrics import EvalReport, evaluate_split
from .model import (
    AAP_VARIANTS,
    ATTRIBUTE_NAMES,
    AestheticNet,
    ModelConfig,
    export_attention_weights,
    save_checkpoint,
)
from .ppm import read_ppm

# seed-stream tags so the epoch/batch/augmentation generators never collide
_BATCH_STREAM = 1
_AUG_STREAM = 2
_VAL_STREAM = 3


class TrainingDivergedError(ArithmeticError):
    """Loss became non-finite; message carries epoch/batch coordinates."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training run depends on.

    Serialized as a flat JSON document with these field names, except
    ``relative_weight`` which uses the key "lambda".
    """

    # supervision
    mode: str = "score"  # "score" | "distribution"
    relative_weight: float = 0.05
    emd_exponent: float = 2.0
    # optimizer
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # schedule
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    max_epochs: int = 60
    # run
    seed: int = 0
    augment_hflip: bool = True
    freeze_extractors: bool = False
    # model / ablation axes
    attributes: tuple[str, ...] = ATTRIBUTE_NAMES
    interaction: bool = True
    aap_variant: str = "full"
    channels: int = 16
    input_size: int = 16
    stem_channels: tuple[int, int] = (8, 16)
    buckets: int = 10
    mlp_reduction: int = 16
    gate_includes_generic: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.relative_weight > 0 and self.batch_size < 5:
            raise ValueError("batch_size must be >= 5 while the relative loss is active")
        for name in ("lr", "plateau_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.aap_variant not in AAP_VARIANTS:
            raise ValueError(f"unknown aap variant {self.aap_variant!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            attributes=tuple(self.attributes),
            mode=self.mode,
            buckets=self.buckets,
            channels=self.channels,
            input_size=self.input_size,
            stem_channels=tuple(self.stem_channels),
            aap_variant=self.aap_variant,
            interaction=self.interaction,
            gate_includes_generic=self.gate_includes_generic,
            mlp_reduction=self.mlp_reduction,
            init_seed=self.seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(mode=self.mode, relative_weight=self.relative_weight,
                          emd_exponent=self.emd_exponent, buckets=self.buckets)

    def to_json(self) -> str:
        doc = {}
        for f in fields(self):
            key = "lambda" if f.name == "relative_weight" else f.name
            value = getattr(self, f.name)
            doc[key] = list(value) if isinstance(value, tuple) else value
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        doc = json.loads(text)
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            name = "relative_weight" if key == "lambda" else key
            if name not in known:
                raise ValueError(f"unknown config key {key!r}")
            if name in ("attributes", "stem_channels"):
                value = tuple(value)
            kwargs[name] = value
        return cls(**kwargs)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float, beta2: float, eps: float,
              weight_decay: float) -> None:
    """One bias-corrected Adam update in place; decoupled weight decay is
    applied to the parameter before the Adam delta."""
    if grad.shape != value.shape:
        raise ValueError(f"adam_step: grad {grad.shape} vs value {value.shape}")
    if weight_decay:
        value -= lr * weight_decay * value
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a model's named parameters with a mutable learning rate."""

    def __init__(self, model: AestheticNet, cfg: TrainConfig,
                 skip_prefixes: tuple[str, ...] = ()) -> None:
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self._slots = []
        for name, arr, grad in model.named_parameters():
            if name.startswith(skip_prefixes):
                continue
            self._slots.append((name, arr, grad, np.zeros_like(arr), np.zeros_like(arr)))

    def step(self) -> None:
        self.t += 1
        for _, arr, grad, m, v in self._slots:
            adam_step(arr, grad, m, v, self.t, self.lr, self.cfg.beta1,
                      self.cfg.beta2, self.cfg.adam_epsilon, self.cfg.weight_decay)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


class PlateauTracker:
    """Counts epochs since the last strict improvement of the best loss.

    The very first observation counts as non-improving (there is nothing
    to improve on yet), so a flat history of length ``patience`` fires at
    exactly epoch ``patience``.  ``update`` returns True when the counter
    reaches ``patience``; the counter then resets.
    """

    def __init__(self, patience: int) -> None:
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.stale = 0
        self.started = False

    def update(self, loss: float) -> bool:
        if self.started and loss < self.best:
            self.best = min(self.best, loss)
            self.stale = 0
            return False
        self.best = min(self.best, loss)
        self.started = True
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return True
        return False


def plateau_events(history, patience: int) -> list[int]:
    """1-based epochs at which a tracker over ``history`` fires."""
    tracker = PlateauTracker(patience)
    return [epoch for epoch, loss in enumerate(history, start=1) if tracker.update(loss)]


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One loaded dataset record ready for the model."""

    sample_id: str
    features: np.ndarray  # (3, H, W) in [-0.5, 0.5]
    score: float
    distribution: np.ndarray
    index: int = 0


def _featurize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64).transpose(2, 0, 1) / 255.0 - 0.5


def load_samples(manifest_path, input_size: int) -> tuple[dict[str, list[Sample]], int]:
    """Read a manifest into per-split sample lists; invalid records
    (malformed lines, bad labels, unreadable or mis-sized images) are
    skipped and counted rather than aborting the run."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    splits: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    skipped = 0
    lines = [line for line in manifest_path.read_text(encoding="ascii").splitlines()
             if line.strip()]
    for index, line in enumerate(lines):
        try:
            record = ManifestRecord.from_json(line)
            record.validate()
            img = read_ppm(base / record.path)
            if img.width != input_size or img.height != input_size:
                raise ValueError(
                    f"{record.sample_id}: image is {img.width}x{img.height}, "
                    f"expected {input_size}x{input_size}")
            sample = Sample(
                sample_id=record.sample_id,
                features=_featurize(img.pixels),
                score=record.score,
                distribution=np.asarray(record.distribution),
                index=index,
            )
        except (KeyError, ValueError, OSError):
            skipped += 1
            continue
        splits[split_of(record.sample_id)].append(sample)
    return splits, skipped


def build_batches(samples: list[Sample], batch_size: int,
                  rng: np.random.Generator | None) -> list[SortedBatch]:
    """Shuffle, chunk, then sort each chunk by ground truth descending
    (ties keep ascending original index).  Chunks shorter than five are
    flagged exempt from the relative term."""
    if not samples:
        raise ValueError("build_batches: empty split")
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    batches = []
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        chunk.sort(key=lambda s: (-s.score, s.index))
        batches.append(SortedBatch(
            g=np.array([s.score for s in chunk]),
            items=chunk,
            relative_exempt=len(chunk) < 5,
        ))
    return batches


def _hflip(features: np.ndarray) -> np.ndarray:
    return features[:, :, ::-1].copy()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    final_report: EvalReport | None = None
    best_epoch: int = 0
    skipped_records: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("epoch,train_loss,val_loss,lr,seconds\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{r.seconds:.3f}\n")


def _model_outputs(model: AestheticNet, batch: SortedBatch, mode: str,
                   flip_mask=None) -> np.ndarray:
    outs = []
    for pos, sample in enumerate(batch.items):
        feats = sample.features
        if flip_mask is not None and flip_mask[pos]:
            feats = _hflip(feats)
        outs.append(model.forward([feats])[0])
    return np.array(outs) if mode == "score" else np.stack(outs)


def _batch_targets(batch: SortedBatch, mode: str) -> np.ndarray:
    if mode == "score":
        return batch.g
    return np.stack([s.distribution for s in batch.items])


def _split_loss(model: AestheticNet, batches: list[SortedBatch], loss_cfg: LossConfig) -> float:
    """Dataset loss without gradients (validation)."""
    total = 0.0
    count = 0
    for batch in batches:
        predicted = _model_outputs(model, batch, loss_cfg.mode)
        model.clear_cache()
        if loss_cfg.mode == "score":
            predicted = predicted[:, 0]
        value = total_loss(predicted, _batch_targets(batch, loss_cfg.mode), batch, loss_cfg)
        total += value.total * batch.size
        count += batch.size
    return total / count


def train(cfg: TrainConfig, manifest_path, out_dir) -> TrainLog:
    """Full training run; writes log.csv, checkpoint.json, eval.json,
    attention.csv (interaction runs), config.json and report figures
    into ``out_dir`` and returns the TrainLog."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits, skipped = load_samples(manifest_path, cfg.input_size)
    for split in ("train", "val", "test"):
        if not splits[split]:
            raise ValueError(
                f"train: split {split!r} is empty"
                + (f" ({skipped} invalid records were skipped; check that the "
                   f"images match input_size={cfg.input_size})" if skipped else ""))

    model = AestheticNet(cfg.model_config())
    skip = ("stem.", "extract.") if cfg.freeze_extractors else ()
    optimizer = Adam(model, cfg, skip_prefixes=skip)
    loss_cfg = cfg.loss_config()
    plateau = PlateauTracker(cfg.plateau_patience)
    stopper = PlateauTracker(cfg.early_stop_patience)

    log = TrainLog(skipped_records=skipped)
    best_val = math.inf
    best_state = None
    val_batches = build_batches(splits["val"], cfg.batch_size, None)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        epoch_lr = optimizer.lr
        batch_rng = np.random.default_rng([cfg.seed, epoch, _BATCH_STREAM])
        aug_rng = np.random.default_rng([cfg.seed, epoch, _AUG_STREAM])
        running = 0.0
        seen = 0
        for batch_index, batch in enumerate(build_batches(splits["train"], cfg.batch_size, batch_rng)):
            flips = aug_rng.random(batch.size) < 0.5 if cfg.augment_hflip else None
            model.zero_grads()
            predicted = _model_outputs(model, batch, cfg.mode, flips)
            if cfg.mode == "score":
                predicted = predicted[:, 0]
            value = total_loss(predicted, _batch_targets(batch, cfg.mode), batch, loss_cfg)
            if not math.isfinite(value.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}")
            for pos in reversed(range(batch.size)):
                model.backward([value.grad[pos] if cfg.mode == "distribution"
                                else np.array([value.grad[pos]])])
            optimizer.step()
            running += value.total * batch.size
            seen += batch.size

        val_loss = _split_loss(model, val_batches, loss_cfg)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        log.rows.append(EpochRow(epoch, running / seen, val_loss, epoch_lr,
                                 time.perf_counter() - t0))
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
            log.best_epoch = epoch
        if plateau.update(val_loss):
            optimizer.lr *= cfg.plateau_factor
        if stopper.update(val_loss):
            break

    if best_state is not None:
        for name, arr, _ in model.named_parameters():
            arr[...] = best_state[name]

    log.final_report = evaluate_split(model, splits["test"], loss_cfg)

    log.write_csv(out_dir / "log.csv")
    save_checkpoint(model, out_dir / "checkpoint.json")
    (out_dir / "eval.json").write_text(log.final_report.to_json(), encoding="ascii")
    (out_dir / "config.json").write_text(cfg.to_json(), encoding="ascii")
    if cfg.interaction:
        rows = []
        for sample in splits["test"]:
            _, weights = model.predict(sample.features)
            rows.append((sample.sample_id, weights))
        export_attention_weights(rows, out_dir / "attention.csv")
    from .plots import save_prediction_scatter, save_training_curves
    save_training_curves(log.rows, out_dir / "curves.png")
    save_prediction_scatter(log.final_report, out_dir / "scatter.png")
    return log
