"""Figure rendering for reports. All figures are written to files (Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .datakit import PairSample
from .evalkit import EvalReport

__all__ = ["plot_training_curves", "plot_pck_bars", "plot_bench", "plot_match_overlay"]


def plot_training_curves(histories: List[List[dict]], path: str | Path,
                         labels: Sequence[str] | None = None) -> None:
    """Loss and validation PCK versus epoch, one curve set per network."""
    if labels is None:
        labels = [f"net{i}" for i in range(len(histories))]
    fig, (ax_loss, ax_pck) = plt.subplots(1, 2, figsize=(9, 3.5))
    for history, label in zip(histories, labels):
        epochs = [rec["epoch"] for rec in history]
        ax_loss.plot(epochs, [rec["train_loss"] for rec in history], label=f"{label} total")
        ax_loss.plot(epochs, [rec["gt_loss"] for rec in history], "--", label=f"{label} gt")
        ax_pck.plot(epochs, [rec["val_pck"] for rec in history], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss (px)")
    ax_loss.legend(fontsize=7)
    ax_pck.set_xlabel("epoch")
    ax_pck.set_ylabel("val PCK@0.1")
    ax_pck.set_ylim(0, 1)
    ax_pck.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pck_bars(report: EvalReport, path: str | Path) -> None:
    """Per-class PCK bars, one group per alpha, plus the overall level."""
    classes = list(report.per_class)
    xs = np.arange(len(classes))
    width = 0.8 / max(len(report.alphas), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(classes) + 2), 3.5))
    for i, alpha in enumerate(report.alphas):
        vals = [report.per_class[c][alpha] for c in classes]
        ax.bar(xs + i * width, vals, width=width, label=f"alpha={alpha}")
        ax.axhline(report.overall[alpha], color="gray", lw=0.6, ls=":")
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(classes, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"PCK ({report.basis})")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bench(rows: List[dict], path: str | Path) -> None:
    """Element counts and measured times versus kernel size (log scale)."""
    ks = [r["K"] for r in rows]
    fig, (ax_el, ax_t) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_el.plot(ks, [r["sparse_elements"] for r in rows], "o-", label="sparse 4(K-1)hw")
    ax_el.plot(ks, [r["dense_elements"] for r in rows], "s-", label="dense (K^2-1)hw")
    ax_el.set_xlabel("K")
    ax_el.set_ylabel("descriptor elements")
    ax_el.set_yscale("log")
    ax_el.legend(fontsize=8)
    ax_t.plot(ks, [r["sparse_time"] * 1e3 for r in rows], "o-", label="sparse")
    ax_t.plot(ks, [r["dense_time"] * 1e3 for r in rows], "s-", label="dense")
    ax_t.set_xlabel("K")
    ax_t.set_ylabel("median time (ms)")
    ax_t.set_yscale("log")
    ax_t.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_match_overlay(sample: PairSample, predictions: Sequence[tuple], path: str | Path) -> None:
    """Side-by-side pair with annotated vs predicted source keypoints."""
    fig, (ax_s, ax_t) = plt.subplots(1, 2, figsize=(8, 4))
    ax_s.imshow(sample.source.permute(1, 2, 0).numpy())
    ax_t.imshow(sample.target.permute(1, 2, 0).numpy())
    for (src, tgt), pred in zip(sample.keypoints, predictions):
        ax_s.plot(src[0] - 0.5, src[1] - 0.5, "g+", ms=9)
        ax_s.plot(pred[0] - 0.5, pred[1] - 0.5, "rx", ms=7)
        ax_t.plot(tgt[0] - 0.5, tgt[1] - 0.5, "g+", ms=9)
    ax_s.set_title("source: + gt, x predicted")
    ax_t.set_title("target")
    for ax in (ax_s, ax_t):
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
