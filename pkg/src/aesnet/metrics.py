"""Evaluation statistics: linear and rank correlation, threshold
accuracy, test-set MSE/EMD, bundled into a serializable report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import ShapeError, as_tensor
from .losses import emd_loss


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (constant input or too few samples)."""


def _pair(x, y, op: str) -> tuple[np.ndarray, np.ndarray]:
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"{op}: x{x.shape} vs y{y.shape}")
    return x, y


def plcc(x, y) -> float:
    """Pearson correlation, population form: cov(x, y) / (std x * std y)."""
    x, y = _pair(x, y, "plcc")
    if x.size < 2:
        raise UndefinedCorrelationError(f"plcc needs n >= 2, got {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = float(np.sqrt(np.sum(xc * xc) * np.sum(yc * yc)))
    if denom == 0.0:
        raise UndefinedCorrelationError("plcc undefined for constant input")
    return float(np.sum(xc * yc) / denom)


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    x = as_tensor(x)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(x, y) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    x, y = _pair(x, y, "srcc")
    return plcc(average_ranks(x), average_ranks(y))


def binary_accuracy(pred, gt, threshold: float = 5.0) -> float:
    """Fraction of samples where (pred > threshold) agrees with
    (gt > threshold); values exactly at the threshold count as low."""
    pred, gt = _pair(pred, gt, "binary_accuracy")
    return float(np.mean((pred > threshold) == (gt > threshold)))


@dataclass
class EvalReport:
    """Split-level metrics plus per-sample predictions.

    ``plcc``/``srcc`` are None when undefined (constant predictions);
    ``emd`` is None outside distribution mode.
    """

    plcc: float | None
    srcc: float | None
    accuracy: float
    mse: float
    emd: float | None
    n: int
    per_sample: list[tuple[str, float, float]] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "plcc": self.plcc,
            "srcc": self.srcc,
            "accuracy": self.accuracy,
            "mse": self.mse,
            "emd": self.emd,
            "n": self.n,
            "per_sample": [[i, p, g] for i, p, g in self.per_sample],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            plcc=doc["plcc"],
            srcc=doc["srcc"],
            accuracy=doc["accuracy"],
            mse=doc["mse"],
            emd=doc["emd"],
            n=doc["n"],
            per_sample=[(i, p, g) for i, p, g in doc.get("per_sample", [])],
        )


def build_report(ids, pred_scores, gt_scores, *, pred_dists=None, gt_dists=None,
                 emd_exponent: float = 2.0, threshold: float = 5.0) -> EvalReport:
    """Assemble an EvalReport from aligned prediction/ground-truth arrays."""
    pred_scores, gt_scores = _pair(pred_scores, gt_scores, "build_report")
    if len(ids) != pred_scores.size:
        raise ShapeError(f"build_report: {len(ids)} ids vs {pred_scores.size} predictions")
    try:
        p = plcc(pred_scores, gt_scores)
        s = srcc(pred_scores, gt_scores)
    except UndefinedCorrelationError:
        p = s = None
    mse = float(np.mean((pred_scores - gt_scores) ** 2))
    emd = None
    if pred_dists is not None:
        emd = float(np.mean([
            emd_loss(pd, gd, emd_exponent)[0] for pd, gd in zip(pred_dists, gt_dists)
        ]))
    per_sample = [(str(i), float(ps), float(gs))
                  for i, ps, gs in zip(ids, pred_scores, gt_scores)]
    return EvalReport(
        plcc=p,
        srcc=s,
        accuracy=binary_accuracy(pred_scores, gt_scores, threshold),
        mse=mse,
        emd=emd,
        n=int(pred_scores.size),
        per_sample=per_sample,
    )


def evaluate_split(model, samples, cfg) -> EvalReport:
    """Run the model over one dataset split and score it.

    ``samples`` are dataset samples with ``sample_id``, ``features``,
    ``score`` and (in distribution mode) ``distribution`` attributes.
    """
    if not samples:
        raise ValueError("evaluate_split: empty split")
    ids, preds, gts = [], [], []
    pred_dists = gt_dists = None
    if cfg.mode == "distribution":
        pred_dists, gt_dists = [], []
    for sample in samples:
        prediction, _ = model.predict(sample.features)
        ids.append(sample.sample_id)
        preds.append(prediction.score)
        gts.append(sample.score)
        if pred_dists is not None:
            pred_dists.append(prediction.distribution)
            gt_dists.append(sample.distribution)
    return build_report(ids, np.array(preds), np.array(gts),
                        pred_dists=pred_dists, gt_dists=gt_dists,
                        emd_exponent=getattr(cfg, "emd_exponent", 2.0))
