"""Report figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_training_curves(rows, path) -> None:
    """Train/val loss curves with the learning-rate step function."""
    epochs = [r.epoch for r in rows]
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True, height_ratios=[3, 1])
    ax_loss.plot(epochs, [r.train_loss for r in rows], label="train", lw=1.5)
    ax_loss.plot(epochs, [r.val_loss for r in rows], label="val", lw=1.5)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(frameon=False)
    ax_loss.grid(alpha=0.3)
    ax_lr.step(epochs, [r.lr for r in rows], where="post", color="tab:red")
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("epoch")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_prediction_scatter(report, path) -> None:
    """Predicted vs ground-truth scores for one evaluated split."""
    gt = [g for _, _, g in report.per_sample]
    pred = [p for _, p, _ in report.per_sample]
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    ax.scatter(gt, pred, s=12, alpha=0.5, edgecolors="none")
    lo, hi = 1.0, 10.0
    ax.plot([lo, hi], [lo, hi], color="gray", lw=1, ls="--")
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_xlabel("ground truth")
    ax.set_ylabel("prediction")
    bits = [f"n={report.n}"]
    if report.plcc is not None:
        bits.append(f"plcc={report.plcc:.3f}")
    if report.srcc is not None:
        bits.append(f"srcc={report.srcc:.3f}")
    ax.set_title("  ".join(bits), fontsize=10)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
