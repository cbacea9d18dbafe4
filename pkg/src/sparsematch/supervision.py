"""Sparse-label supervision: masks, losses, dilation, and label selection.

Keypoint annotations become a binary cell mask plus subpixel ground-truth
flow values. Pseudo-labels from a teacher network are filtered by dilating
that mask (spatial prior) and by keeping only the smallest-loss fraction of
the dilated foreground (small-loss principle), with the kept fraction
ramping up over epochs.
"""

from __future__ import annotations

import math
import warnings
from typing import Iterable, Tuple

import torch
import torch.nn.functional as F

from .config import LossWeights, SelectionSchedule

__all__ = [
    "build_label_mask",
    "dilate_mask",
    "gt_loss",
    "pseudo_loss_masked",
    "selection_ratio",
    "select_small_loss",
    "combined_objective",
]

KeypointPair = Tuple[Tuple[float, float], Tuple[float, float]]


def build_label_mask(
    keypoint_pairs: Iterable[KeypointPair],
    grid: Tuple[int, int],
    stride: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rasterize sparse (source, target) keypoint pairs onto a label grid.

    Each target keypoint (x, y) claims cell (floor(y/stride), floor(x/stride));
    the ground-truth flow at that cell is the exact subpixel source
    coordinate. Keypoints outside the grid extent are rejected with a
    warning, and when two targets land in the same cell the first one wins.

    Returns (mask [H, W] with entries {0, 1}, flow [2, H, W] valid where
    mask == 1).
    """
    height, width = grid
    mask = torch.zeros((height, width))
    flow = torch.zeros((2, height, width))
    for idx, (src, tgt) in enumerate(keypoint_pairs):
        col = math.floor(tgt[0] / stride)
        row = math.floor(tgt[1] / stride)
        if not (0 <= row < height and 0 <= col < width):
            warnings.warn(
                f"keypoint {idx} target {tuple(tgt)} is outside the {height}x{width} grid "
                f"(stride {stride}); skipped"
            )
            continue
        if mask[row, col] > 0:
            warnings.warn(
                f"keypoint {idx} collides with an earlier keypoint in cell "
                f"({row}, {col}); keeping the first"
            )
            continue
        mask[row, col] = 1.0
        flow[0, row, col] = float(src[0])
        flow[1, row, col] = float(src[1])
    return mask, flow


def dilate_mask(mask: torch.Tensor, kernel_size: int) -> torch.Tensor:
    """Binary dilation with a k x k all-ones window (zero padding).

    A cell turns on iff any cell of the window centered on it is on, i.e.
    convolution with ones followed by a > 0 threshold.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"dilation kernel must be odd and positive, got {kernel_size}")
    if kernel_size == 1:
        return mask.clone()
    kernel = torch.ones((1, 1, kernel_size, kernel_size), dtype=mask.dtype)
    hits = F.conv2d(mask[None, None], kernel, padding=kernel_size // 2)[0, 0]
    return (hits > 0).to(mask.dtype)


def _masked_l2(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape or pred.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    diff = pred - target
    sq = (diff * diff).sum(dim=-3)
    # masked sqrt: exactly 0 where pred == target, and no NaN gradient there
    pos = sq > 0
    dist = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return dist * mask


def gt_loss(
    flow_pred: torch.Tensor, flow_gt: torch.Tensor, mask: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Masked L2 distance to the sparse ground truth.

    Returns (per-cell grid, mean over labeled cells). An empty mask gives a
    zero mean with a warning so corrupted samples cannot crash training.
    """
    per_cell = _masked_l2(flow_pred, flow_gt, mask)
    count = mask.sum()
    if count.item() == 0:
        warnings.warn("ground-truth loss over an empty label mask; returning 0")
        return per_cell, per_cell.sum() * 0.0
    return per_cell, per_cell.sum() / count


def pseudo_loss_masked(
    flow_pred: torch.Tensor, flow_pseudo: torch.Tensor, mask_dilated: torch.Tensor
) -> torch.Tensor:
    """Per-cell L2 distance to the pseudo-label flow inside the dilated mask.

    The pseudo flow is detached here, so no gradient ever reaches the network
    that produced it.
    """
    return _masked_l2(flow_pred, flow_pseudo.detach(), mask_dilated)


def selection_ratio(epoch: int, schedule: SelectionSchedule) -> float:
    """Selected fraction for a given epoch: linear ramp, then flat."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    frac = min(epoch / schedule.ramp_epochs, 1.0)
    return schedule.r_start + (schedule.r_end - schedule.r_start) * frac


def select_small_loss(
    per_cell: torch.Tensor, mask_dilated: torch.Tensor, ratio: float
) -> torch.Tensor:
    """Pick the ceil(ratio * N) smallest-loss foreground cells.

    Returns the selected flat cell indices (row-major), sorted ascending.
    Ties are broken toward the smallest linear index; an empty foreground
    yields an empty selection.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ValueError(f"selection ratio must be in [0, 1], got {ratio}")
    if per_cell.shape != mask_dilated.shape:
        raise ValueError(
            f"shape mismatch: per_cell {tuple(per_cell.shape)} vs mask {tuple(mask_dilated.shape)}"
        )
    fg = (mask_dilated.reshape(-1) > 0).nonzero(as_tuple=True)[0]
    if fg.numel() == 0:
        return fg
    n_keep = math.ceil(ratio * fg.numel())
    losses = per_cell.reshape(-1)[fg]
    order = torch.argsort(losses, stable=True)
    return torch.sort(fg[order[:n_keep]]).values


def combined_objective(
    mean_gt: torch.Tensor | float, mean_pseudo: torch.Tensor | float, weights: LossWeights
) -> torch.Tensor | float:
    """Total per-pair objective: ground-truth mean plus weighted pseudo mean."""
    return mean_gt + weights.pseudo_weight * mean_pseudo
