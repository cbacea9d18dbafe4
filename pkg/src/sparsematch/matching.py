"""Correlation-based dense matching.

Builds a 4D cosine correlation volume between two context feature maps,
sharpens it with mutual-nearest-neighbor reweighting, bilinearly upsamples
it, and reads out a dense target-to-source flow with a kernel soft-argmax.
All operations are differentiable (the hard argmax inside the soft-argmax is
treated as a constant).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F

from .encoder import ContextFeatureMap

__all__ = [
    "CorrelationVolume",
    "FlowField",
    "correlation_4d",
    "mutual_nn_filter",
    "upsample_correlation",
    "kernel_soft_argmax",
    "transfer_keypoints",
]

MNN_EPS = 1e-30


@dataclass
class CorrelationVolume:
    """4D similarity scores, ``values`` shaped [h_a, w_a, h_b, w_b], all >= 0."""

    values: torch.Tensor
    stride: float = 16

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(
                f"correlation volume must be 4D, got shape {tuple(self.values.shape)}"
            )


@dataclass
class FlowField:
    """Per-target-cell predicted source coordinate.

    ``values`` is [2, H_b, W_b] with channel order (x, y), in absolute input
    pixels; cell (r, c) of a stride-s grid has pixel center ((c+0.5)s, (r+0.5)s).
    """

    values: torch.Tensor
    stride: float

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != 2:
            raise ValueError(f"flow field must be [2, H, W], got {tuple(self.values.shape)}")


def _normalize_channels(values: torch.Tensor) -> torch.Tensor:
    """Unit-normalize along dim -3; zero-norm vectors stay zero."""
    sq = (values * values).sum(dim=-3, keepdim=True)
    valid = sq > 0
    denom = torch.sqrt(torch.where(valid, sq, torch.ones_like(sq)))
    return torch.where(valid, values / denom, torch.zeros_like(values))


def _correlation(feats_a: torch.Tensor, feats_b: torch.Tensor) -> torch.Tensor:
    """Clamped cosine similarity, [..., c, ha, wa] x [..., c, hb, wb] -> [..., ha, wa, hb, wb]."""
    if feats_a.shape[-3] != feats_b.shape[-3]:
        raise ValueError(
            f"channel mismatch: {feats_a.shape[-3]} vs {feats_b.shape[-3]}"
        )
    na = _normalize_channels(feats_a)
    nb = _normalize_channels(feats_b)
    corr = torch.einsum("...cij,...ckl->...ijkl", na, nb)
    return corr.clamp(min=0.0)


def correlation_4d(feats_a: ContextFeatureMap, feats_b: ContextFeatureMap) -> CorrelationVolume:
    """Cosine similarity between every source cell and every target cell.

    Values are clamped at zero so the downstream ratio filter is well posed;
    zero-norm feature vectors correlate to 0 with everything.
    """
    if feats_a.stride != feats_b.stride:
        raise ValueError(f"stride mismatch: {feats_a.stride} vs {feats_b.stride}")
    return CorrelationVolume(_correlation(feats_a.values, feats_b.values), stride=feats_a.stride)


def _mutual_nn(values: torch.Tensor) -> torch.Tensor:
    """Reweight [..., ha, wa, hb, wb] scores by their ratio to row/col maxima."""
    if (values < 0).any():
        raise ValueError("mutual NN filtering requires nonnegative correlation values")
    max_over_source = values.amax(dim=(-4, -3), keepdim=True)
    max_over_target = values.amax(dim=(-2, -1), keepdim=True)
    return values * (values / (max_over_source + MNN_EPS)) * (values / (max_over_target + MNN_EPS))


def mutual_nn_filter(volume: CorrelationVolume) -> CorrelationVolume:
    """Suppress non-reciprocal matches.

    Each entry is rescaled by its ratio to the maximum over all source cells
    (for its target cell) and to the maximum over all target cells (for its
    source cell); mutual argmax entries keep their value up to the division
    guard epsilon.
    """
    return CorrelationVolume(_mutual_nn(volume.values), stride=volume.stride)


def _upsample(values: torch.Tensor, factor: int) -> torch.Tensor:
    """Corner-aligned separable bilinear upsampling of all four axes of [..., ha, wa, hb, wb]."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return values
    lead = values.shape[:-4]
    ha, wa, hb, wb = values.shape[-4:]
    hb2, wb2 = hb * factor, wb * factor
    ha2, wa2 = ha * factor, wa * factor
    flat = values.reshape(-1, 1, hb, wb)
    flat = F.interpolate(flat, size=(hb2, wb2), mode="bilinear", align_corners=True)
    out = flat.reshape(lead + (ha, wa, hb2, wb2))
    out = out.permute(*range(len(lead)), -2, -1, -4, -3)
    flat = out.reshape(-1, 1, ha, wa)
    flat = F.interpolate(flat, size=(ha2, wa2), mode="bilinear", align_corners=True)
    out = flat.reshape(lead + (hb2, wb2, ha2, wa2))
    return out.permute(*range(len(lead)), -2, -1, -4, -3)


def upsample_correlation(volume: CorrelationVolume, factor: int) -> CorrelationVolume:
    """Bilinearly upsample the volume; corner values are preserved exactly."""
    return CorrelationVolume(_upsample(volume.values, factor), stride=volume.stride / factor)


def _soft_argmax(values: torch.Tensor, sigma: float, tau: float,
                 stride: float) -> torch.Tensor:
    """Kernel soft-argmax over source cells of [..., ha, wa, hb, wb].

    Returns [..., 2, hb, wb] flow in pixels, channels (x, y). A Gaussian
    window centered on the (detached) hard argmax gates the softmax; ties in
    the argmax go to the smallest linear source index.
    """
    ha, wa, hb, wb = values.shape[-4:]
    lead = values.shape[:-4]
    n_src = ha * wa
    flat = values.reshape(lead + (n_src, hb * wb))

    with torch.no_grad():
        peak = flat.amax(dim=-2, keepdim=True)
        src_index = torch.arange(n_src, device=values.device).view(
            (1,) * len(lead) + (n_src, 1)
        )
        candidates = torch.where(flat == peak, src_index, torch.full_like(src_index, n_src))
        argmax = candidates.amin(dim=-2)                       # [..., hb*wb]
        peak_row = (argmax // wa).to(values.dtype)
        peak_col = (argmax % wa).to(values.dtype)

    rows = torch.arange(ha, device=values.device, dtype=values.dtype)
    cols = torch.arange(wa, device=values.device, dtype=values.dtype)
    grid_r = rows[:, None].expand(ha, wa).reshape(n_src)
    grid_c = cols[None, :].expand(ha, wa).reshape(n_src)
    shape = (1,) * len(lead) + (n_src, 1)
    dist_sq = (grid_r.view(shape) - peak_row.unsqueeze(-2)) ** 2 + (
        grid_c.view(shape) - peak_col.unsqueeze(-2)
    ) ** 2
    window = torch.exp(-dist_sq / (2.0 * sigma * sigma))

    weights = torch.softmax(flat * window / tau, dim=-2)
    exp_row = (weights * grid_r.view(shape)).sum(dim=-2)
    exp_col = (weights * grid_c.view(shape)).sum(dim=-2)
    # the expectation is a convex combination of grid indices; clamping only
    # removes float accumulation drift past the hull
    exp_row = exp_row.clamp(0.0, ha - 1.0)
    exp_col = exp_col.clamp(0.0, wa - 1.0)
    x = (exp_col + 0.5) * stride
    y = (exp_row + 0.5) * stride
    return torch.stack([x, y], dim=-2).reshape(lead + (2, hb, wb))


def kernel_soft_argmax(volume: CorrelationVolume, sigma: float = 5.0,
                       tau: float = 0.02) -> FlowField:
    """Differentiable flow readout from an upsampled correlation volume.

    For each target cell the softmax over source cells of
    (score * gaussian_window) / tau yields weights whose coordinate
    expectation is the predicted source position, converted to pixels via
    (index + 0.5) * stride. No learnable parameters.
    """
    if sigma <= 0 or tau <= 0:
        raise ValueError(f"sigma and tau must be positive, got {sigma}, {tau}")
    if volume.values.numel() == 0:
        raise ValueError("empty correlation volume")
    return FlowField(
        _soft_argmax(volume.values, sigma, tau, volume.stride), stride=volume.stride
    )


def _sample_bilinear(values: torch.Tensor, col: float, row: float) -> torch.Tensor:
    """Bilinear sample of [2, H, W] at fractional grid coords, border-clamped."""
    _, h, w = values.shape
    col = min(max(col, 0.0), w - 1.0)
    row = min(max(row, 0.0), h - 1.0)
    c0, r0 = int(col), int(row)
    c1, r1 = min(c0 + 1, w - 1), min(r0 + 1, h - 1)
    fc, fr = col - c0, row - r0
    top = values[:, r0, c0] * (1 - fc) + values[:, r0, c1] * fc
    bot = values[:, r1, c0] * (1 - fc) + values[:, r1, c1] * fc
    return top * (1 - fr) + bot * fr


def transfer_keypoints(
    flow: FlowField,
    target_points: Sequence[Tuple[float, float]],
    image_extent: Tuple[float, float] | None = None,
) -> Tuple[List[Tuple[float, float]], List[bool]]:
    """Predict source positions for subpixel target keypoints.

    The flow field is interpolated channel-wise at each target location
    (grid coordinate = pixel / stride - 0.5). Returns the predicted (x, y)
    list plus per-point validity flags; points outside ``image_extent``
    (width, height, default grid extent) are flagged False and clamped.
    """
    _, h, w = flow.values.shape
    if image_extent is None:
        image_extent = (w * flow.stride, h * flow.stride)
    preds: List[Tuple[float, float]] = []
    flags: List[bool] = []
    for x, y in target_points:
        inside = 0.0 <= x <= image_extent[0] and 0.0 <= y <= image_extent[1]
        sample = _sample_bilinear(flow.values, x / flow.stride - 0.5, y / flow.stride - 0.5)
        preds.append((float(sample[0]), float(sample[1])))
        flags.append(bool(inside))
    return preds, flags
