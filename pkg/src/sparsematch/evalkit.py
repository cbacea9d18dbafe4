"""Keypoint-transfer evaluation: PCK metric, per-class reports, writers."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import torch

from .datakit import PairSample
from .matching import FlowField, transfer_keypoints

__all__ = ["EvalReport", "pck", "evaluate", "report_to_json", "report_to_csv", "format_table"]

Point = Tuple[float, float]


@dataclass
class EvalReport:
    """PCK tables per class plus keypoint-weighted overall numbers.

    ``per_class[cls][alpha]`` and ``overall[alpha]`` are fractions in [0, 1];
    overall is total-correct over total-keypoints, not a class average.
    """

    alphas: List[float]
    basis: str
    per_class: Dict[str, Dict[float, float]] = field(default_factory=dict)
    overall: Dict[float, float] = field(default_factory=dict)
    keypoints_per_class: Dict[str, int] = field(default_factory=dict)
    sample_count: int = 0

    @property
    def total_keypoints(self) -> int:
        return sum(self.keypoints_per_class.values())


def pck(
    pred: Sequence[Point],
    gt: Sequence[Point],
    alpha: float,
    basis_dims: Tuple[float, float],
) -> float:
    """Fraction of predictions within alpha * max(h, w) of the ground truth.

    The threshold is inclusive, so an error exactly on the boundary counts
    as correct.
    """
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} ground truth")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not pred:
        return 0.0
    threshold = alpha * max(basis_dims)
    hits = sum(
        1 for p, g in zip(pred, gt) if math.hypot(p[0] - g[0], p[1] - g[1]) <= threshold
    )
    return hits / len(pred)


def _basis_dims(sample: PairSample, basis: str, dims_from: str) -> Tuple[float, float]:
    if basis == "img":
        img = sample.source if dims_from == "source" else sample.target
        return (float(img.shape[-2]), float(img.shape[-1]))
    if basis == "bbox":
        box = sample.bbox_source if dims_from == "source" else sample.bbox_target
        if box is None:
            raise ValueError("bbox basis requested but sample has no bounding box")
        x0, y0, x1, y1 = box
        return (float(y1 - y0), float(x1 - x0))
    raise ValueError(f"basis must be 'img' or 'bbox', got {basis!r}")


def evaluate(
    model,
    dataset: Sequence[PairSample],
    alphas: Sequence[float] = (0.05, 0.1, 0.15),
    basis: str = "img",
    dims_from: str = "source",
    batch_size: int = 16,
) -> EvalReport:
    """Deterministic, augmentation-free PCK evaluation of a matcher.

    Flow is predicted per pair, keypoints are transferred by interpolating
    it, and errors are thresholded against alpha * max(h, w) with (h, w)
    taken from the ``dims_from`` image or bounding box (predictions land in
    the source image, hence the default).
    """
    alphas = list(alphas)
    correct: Dict[str, Dict[float, int]] = {}
    totals: Dict[str, int] = {}
    model.eval()
    device = next(model.parameters()).device if any(True for _ in model.parameters()) else "cpu"

    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        src = torch.stack([s.source for s in chunk]).to(device)
        tgt = torch.stack([s.target for s in chunk]).to(device)
        with torch.no_grad():
            flows = model(src, tgt)
        for sample, flow_values in zip(chunk, flows):
            if not sample.keypoints:
                continue
            flow = FlowField(flow_values, stride=model.flow_stride)
            preds, _ = transfer_keypoints(flow, [t for _, t in sample.keypoints])
            gt = [s for s, _ in sample.keypoints]
            dims = _basis_dims(sample, basis, dims_from)
            cls = sample.category
            totals[cls] = totals.get(cls, 0) + len(gt)
            bucket = correct.setdefault(cls, {a: 0 for a in alphas})
            for alpha in alphas:
                thr = alpha * max(dims)
                bucket[alpha] += sum(
                    1
                    for p, g in zip(preds, gt)
                    if math.hypot(p[0] - g[0], p[1] - g[1]) <= thr
                )

    report = EvalReport(alphas=alphas, basis=basis, sample_count=len(dataset))
    report.keypoints_per_class = dict(sorted(totals.items()))
    for cls in report.keypoints_per_class:
        report.per_class[cls] = {a: correct[cls][a] / totals[cls] for a in alphas}
    for alpha in alphas:
        n_correct = sum(correct[cls][alpha] for cls in correct)
        n_total = sum(totals.values())
        report.overall[alpha] = n_correct / n_total if n_total else 0.0
    return report


def report_to_json(report: EvalReport, path: str | Path | None = None) -> dict:
    payload = {
        "alphas": report.alphas,
        "basis": report.basis,
        "sample_count": report.sample_count,
        "total_keypoints": report.total_keypoints,
        "overall": {str(a): report.overall[a] for a in report.alphas},
        "per_class": {
            cls: {str(a): vals[a] for a in report.alphas}
            for cls, vals in report.per_class.items()
        },
        "keypoints_per_class": report.keypoints_per_class,
    }
    if path is not None:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return payload


def report_to_csv(report: EvalReport, path: str | Path) -> None:
    """Delimited per-class PCK table, one row per class plus an overall row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "keypoints"] + [f"pck@{a}" for a in report.alphas])
        for cls, vals in report.per_class.items():
            writer.writerow(
                [cls, report.keypoints_per_class[cls]] + [f"{vals[a]:.6f}" for a in report.alphas]
            )
        writer.writerow(
            ["overall", report.total_keypoints]
            + [f"{report.overall[a]:.6f}" for a in report.alphas]
        )


def format_table(report: EvalReport) -> str:
    """Human-readable PCK table for stdout."""
    header = f"{'class':<12}{'kps':>6}" + "".join(f"  pck@{a:<6}" for a in report.alphas)
    lines = [header, "-" * len(header)]
    for cls, vals in report.per_class.items():
        row = f"{cls:<12}{report.keypoints_per_class[cls]:>6}" + "".join(
            f"  {vals[a]:<9.4f}" for a in report.alphas
        )
        lines.append(row)
    lines.append(
        f"{'overall':<12}{report.total_keypoints:>6}"
        + "".join(f"  {report.overall[a]:<9.4f}" for a in report.alphas)
    )
    return "\n".join(lines)
