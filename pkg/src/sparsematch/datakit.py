"""Dataset plumbing: manifests, synthetic warp pairs, augmentation, resizing.

Synthetic pairs are procedural textured blobs on an unstructured background,
warped by a random affine plus a smooth sinusoidal displacement whose exact
target-to-source mapping is known, giving dense ground-truth flow. Sparse
keypoints are sampled inside the blob (foreground) region to mimic real
annotation sparsity.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import IMAGE_MEAN, IMAGE_STD

__all__ = [
    "PairSample",
    "WarpParams",
    "load_manifest",
    "write_manifest",
    "synth_warp_pairs",
    "save_dataset",
    "augment_pair",
    "resize_normalize",
    "keypoint_flow_consistency",
]

KeypointPair = Tuple[Tuple[float, float], Tuple[float, float]]

# Displacement cap relative to image size; keeps the warp family invertible.
MAX_DISPLACEMENT_FRAC = 0.24


@dataclass
class PairSample:
    """One correspondence sample: two images plus sparse keypoint pairs.

    Images are [3, H, W] float tensors in [0, 1]. ``keypoints`` holds
    ((source x, y), (target x, y)) subpixel pairs in image pixels with x
    rightward, y downward, origin at the top-left corner. ``flow`` (synthetic
    data only) stores the source coordinate of every target pixel center as a
    [2, H, W] (x, y) grid. Bounding boxes are (x0, y0, x1, y1).
    """

    source: torch.Tensor
    target: torch.Tensor
    keypoints: List[KeypointPair]
    category: str = "object"
    flow: Optional[torch.Tensor] = None
    bbox_source: Optional[Tuple[float, float, float, float]] = None
    bbox_target: Optional[Tuple[float, float, float, float]] = None

    @property
    def size(self) -> Tuple[int, int]:
        return self.source.shape[-2], self.source.shape[-1]


@dataclass
class WarpParams:
    """Target-to-source mapping: affine part plus sinusoidal displacement."""

    size: int
    matrix: np.ndarray                 # [2, 2] linear part
    offset: np.ndarray                 # [2]
    sine_amp: np.ndarray = field(default_factory=lambda: np.zeros(2))
    sine_freq: np.ndarray = field(default_factory=lambda: np.ones(2))
    sine_phase: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map [N, 2] target pixel coordinates to source coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        out = pts @ self.matrix.T + self.offset
        # the x displacement varies with y and vice versa, so the field is
        # smooth but not affine
        out[:, 0] += self.sine_amp[0] * np.sin(
            2 * np.pi * self.sine_freq[0] * pts[:, 1] / self.size + self.sine_phase[0]
        )
        out[:, 1] += self.sine_amp[1] * np.sin(
            2 * np.pi * self.sine_freq[1] * pts[:, 0] / self.size + self.sine_phase[1]
        )
        return out

    @classmethod
    def identity(cls, size: int) -> "WarpParams":
        return cls(size=size, matrix=np.eye(2), offset=np.zeros(2))

    @classmethod
    def from_source_to_target_affine(cls, size: int, affine_3x3: np.ndarray) -> "WarpParams":
        """Build the target-to-source map as the closed-form affine inverse."""
        inv = np.linalg.inv(np.asarray(affine_3x3, dtype=np.float64))
        return cls(size=size, matrix=inv[:2, :2].copy(), offset=inv[:2, 2].copy())


def _pixel_centers(size: int) -> np.ndarray:
    """[size*size, 2] grid of pixel-center coordinates (x, y)."""
    coords = np.arange(size, dtype=np.float64) + 0.5
    xs, ys = np.meshgrid(coords, coords)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _draw_warp(rng: np.random.Generator, size: int, strength: float) -> WarpParams:
    """Random affine about the image center plus a bounded sinusoid."""
    angle = np.deg2rad(rng.uniform(-18.0, 18.0)) * strength
    scale = float(np.exp(rng.uniform(-0.18, 0.18) * strength))
    tx, ty = rng.uniform(-0.1, 0.1, size=2) * size * strength
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]]) * scale
    center = np.array([size / 2.0, size / 2.0])
    affine = np.eye(3)
    affine[:2, :2] = rot
    affine[:2, 2] = center - rot @ center + np.array([tx, ty])
    warp = WarpParams.from_source_to_target_affine(size, affine)
    warp.sine_amp = rng.uniform(0.02, 0.06, size=2) * size * strength
    warp.sine_freq = rng.uniform(0.5, 1.5, size=2)
    warp.sine_phase = rng.uniform(0, 2 * np.pi, size=2)

    # rescale the whole displacement field if it exceeds the cap
    centers = _pixel_centers(size)
    disp = np.abs(warp.apply(centers) - centers).max()
    cap = MAX_DISPLACEMENT_FRAC * size
    if disp > cap:
        alpha = cap / disp
        warp.matrix = np.eye(2) + alpha * (warp.matrix - np.eye(2))
        warp.offset = alpha * warp.offset
        warp.sine_amp = alpha * warp.sine_amp
    return warp


def _render_source(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Procedural blob image: returns (image [H, W, 3], foreground mask, blob count).

    Blob colors come from a small per-image palette, so several blobs look
    alike and matching them requires spatial context rather than color alone.
    """
    bg = rng.uniform(0.3, 0.7)
    image = np.full((size, size, 3), bg) + rng.normal(0.0, 0.03, (size, size, 3))
    coords = np.arange(size) + 0.5
    xs, ys = np.meshgrid(coords, coords)
    n_blobs = int(rng.integers(4, 8))
    palette = rng.uniform(0.15, 0.95, size=(3, 3))
    wavelengths = rng.uniform(4.0, 9.0, size=2)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
        rx, ry = rng.uniform(0.09 * size, 0.2 * size, size=2)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xs - cx) * ct + (ys - cy) * st
        v = -(xs - cx) * st + (ys - cy) * ct
        blob = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        color = np.clip(palette[rng.integers(0, 3)] + rng.normal(0, 0.04, 3), 0.05, 1.0)
        wavelength = wavelengths[rng.integers(0, 2)] * rng.uniform(0.9, 1.1)
        direction = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        carrier = (xs * np.cos(direction) + ys * np.sin(direction)) * 2 * np.pi / wavelength
        for ch in range(3):
            tex = color[ch] * (0.7 + 0.3 * np.sin(carrier + phase[ch]))
            image[..., ch] = np.where(blob, tex, image[..., ch])
        mask |= blob
    return np.clip(image, 0.0, 1.0), mask, n_blobs


def _bilinear_sample(image: np.ndarray, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sample [H, W, C] at (x, y) pixel coordinates; returns (values, inside flags)."""
    h, w = image.shape[:2]
    x = coords[:, 0] - 0.5
    y = coords[:, 1] - 0.5
    inside = (coords[:, 0] >= 0) & (coords[:, 0] <= w) & (coords[:, 1] >= 0) & (coords[:, 1] <= h)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy, inside


def _mask_bbox(mask: np.ndarray) -> Tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return (0.0, 0.0, float(mask.shape[1]), float(mask.shape[0]))
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _sample_keypoints(
    rng: np.random.Generator,
    warp: WarpParams,
    target_mask: np.ndarray,
    n_points: int,
    size: int,
) -> List[KeypointPair]:
    """Subpixel target keypoints inside the foreground, mapped through the warp."""
    margin = 1.5
    ys, xs = np.nonzero(target_mask)
    keep = (xs >= margin) & (xs < size - margin) & (ys >= margin) & (ys < size - margin)
    candidates = np.stack([xs[keep], ys[keep]], axis=1).astype(np.float64)
    if len(candidates) == 0:
        warnings.warn("no foreground candidates for keypoint sampling")
        return []
    src_at_centers = warp.apply(candidates + 0.5)
    ok = ((src_at_centers >= 1.0) & (src_at_centers <= size - 1.0)).all(axis=1)
    candidates = candidates[ok]
    order = rng.permutation(len(candidates))
    min_sep = 6.0
    pairs: List[KeypointPair] = []
    while len(pairs) < n_points and min_sep >= 1.0:
        for idx in order:
            if len(pairs) >= n_points:
                break
            px, py = candidates[idx]
            tgt = np.array([px + rng.uniform(0.2, 0.8), py + rng.uniform(0.2, 0.8)])
            if any((tgt[0] - t[0]) ** 2 + (tgt[1] - t[1]) ** 2 < min_sep**2 for _, t in pairs):
                continue
            src = warp.apply(tgt[None])[0]
            if not (1.0 <= src[0] <= size - 1.0 and 1.0 <= src[1] <= size - 1.0):
                continue
            pairs.append(((float(src[0]), float(src[1])), (float(tgt[0]), float(tgt[1]))))
        min_sep /= 2.0
    if len(pairs) < n_points:
        warnings.warn(f"sampled only {len(pairs)}/{n_points} keypoints")
    return pairs


def make_warp_pair(
    rng: np.random.Generator,
    size: int,
    kps_per_pair: int,
    warp: Optional[WarpParams] = None,
    warp_strength: float = 1.0,
    noise: float = 0.06,
) -> PairSample:
    """Render one synthetic pair with exact dense flow under a known warp.

    ``noise`` is independent per-image sensor noise, applied after warping so
    the two views never match pixel-perfectly.
    """
    source_np, source_mask, n_blobs = _render_source(rng, size)
    if warp is None:
        warp = _draw_warp(rng, size, warp_strength)

    centers = _pixel_centers(size)
    src_coords = warp.apply(centers)
    sampled, inside = _bilinear_sample(source_np, src_coords)
    fill = np.full((size, size, 3), source_np.reshape(-1, 3).mean(axis=0)) + rng.normal(
        0.0, 0.03, (size, size, 3)
    )
    target_np = np.where(
        inside.reshape(size, size, 1), sampled.reshape(size, size, 3), np.clip(fill, 0, 1)
    )
    mask_vals, _ = _bilinear_sample(source_mask[..., None].astype(np.float64), src_coords)
    target_mask = (mask_vals.reshape(size, size) > 0.5) & inside.reshape(size, size)

    if noise > 0:
        source_np = np.clip(source_np + rng.normal(0.0, noise, source_np.shape), 0.0, 1.0)
        target_np = np.clip(target_np + rng.normal(0.0, noise, target_np.shape), 0.0, 1.0)

    flow = src_coords.reshape(size, size, 2).transpose(2, 0, 1)
    keypoints = _sample_keypoints(rng, warp, target_mask, kps_per_pair, size)
    return PairSample(
        source=torch.from_numpy(source_np.transpose(2, 0, 1).astype(np.float32)),
        target=torch.from_numpy(target_np.transpose(2, 0, 1).astype(np.float32)),
        keypoints=keypoints,
        category=f"blobs{n_blobs}",
        flow=torch.from_numpy(flow.astype(np.float32)),
        bbox_source=_mask_bbox(source_mask),
        bbox_target=_mask_bbox(target_mask),
    )


def synth_warp_pairs(
    seed: int,
    n: int,
    size: int = 64,
    kps_per_pair: int = 8,
    warp_strength: float = 1.0,
    noise: float = 0.06,
) -> List[PairSample]:
    """Generate ``n`` seed-deterministic synthetic pairs with dense GT flow."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        samples.append(
            make_warp_pair(rng, size, kps_per_pair, warp_strength=warp_strength, noise=noise)
        )
    return samples


def keypoint_flow_consistency(sample: PairSample) -> float:
    """Max distance between each source keypoint and the flow sampled at its target."""
    if sample.flow is None:
        raise ValueError("sample has no dense flow")
    from .matching import FlowField, transfer_keypoints

    field_ = FlowField(sample.flow, stride=1.0)
    preds, _ = transfer_keypoints(field_, [tgt for _, tgt in sample.keypoints])
    worst = 0.0
    for (src, _), pred in zip(sample.keypoints, preds):
        worst = max(worst, float(np.hypot(pred[0] - src[0], pred[1] - src[1])))
    return worst


def augment_pair(sample: PairSample, magnitude: float, rng: np.random.Generator) -> PairSample:
    """Photometric jitter (brightness/contrast/saturation), geometry untouched."""
    if magnitude == 0:
        return sample

    def jitter(img: torch.Tensor) -> torch.Tensor:
        b, c, s = rng.uniform(1.0 - magnitude, 1.0 + magnitude, size=3)
        out = img * b
        out = out.mean() + (out - out.mean()) * c
        gray = out.mean(dim=0, keepdim=True)
        out = gray + (out - gray) * s
        return out.clamp(0.0, 1.0)

    return PairSample(
        source=jitter(sample.source),
        target=jitter(sample.target),
        keypoints=sample.keypoints,
        category=sample.category,
        flow=sample.flow,
        bbox_source=sample.bbox_source,
        bbox_target=sample.bbox_target,
    )


def resize_normalize(image: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear-resize to size x size, then per-channel mean/std normalization."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {tuple(image.shape)}")
    if image.shape[1] == 0 or image.shape[2] == 0 or size <= 0:
        raise ValueError("zero-size image or target")
    if image.shape[1:] != (size, size):
        image = F.interpolate(
            image[None], size=(size, size), mode="bilinear", align_corners=False
        )[0]
    mean = torch.tensor(IMAGE_MEAN, dtype=image.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGE_STD, dtype=image.dtype).view(3, 1, 1)
    return (image - mean) / std


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------


def _load_image(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def _scale_points(points: Sequence[Sequence[float]], sx: float, sy: float):
    return [(float(x) * sx, float(y) * sy) for x, y in points]


def load_manifest(path: str | Path, image_size: Optional[int] = None) -> List[PairSample]:
    """Read a JSON Lines manifest into PairSamples, in file order.

    Each record holds source_path, target_path, keypoints {source, target},
    category, and optional bbox_source / bbox_target, with coordinates in
    original-image pixels. Images are resized to ``image_size`` with
    keypoints and boxes scaled by the same factors. Malformed records raise
    with their record index.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    samples = []
    with open(path) as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"manifest record {idx}: invalid JSON ({exc})") from exc
            try:
                kp_src = rec["keypoints"]["source"]
                kp_tgt = rec["keypoints"]["target"]
                if len(kp_src) != len(kp_tgt):
                    raise ValueError(
                        f"keypoint arrays differ in length ({len(kp_src)} vs {len(kp_tgt)})"
                    )
                src_path = path.parent / rec["source_path"]
                tgt_path = path.parent / rec["target_path"]
                source = _load_image(src_path)
                target = _load_image(tgt_path)
            except (KeyError, FileNotFoundError, ValueError) as exc:
                raise ValueError(f"manifest record {idx}: {exc}") from exc

            def scales(img: torch.Tensor) -> Tuple[float, float]:
                if image_size is None:
                    return 1.0, 1.0
                return image_size / img.shape[2], image_size / img.shape[1]

            sx_s, sy_s = scales(source)
            sx_t, sy_t = scales(target)
            src_pts = _scale_points(kp_src, sx_s, sy_s)
            tgt_pts = _scale_points(kp_tgt, sx_t, sy_t)
            if image_size is not None:
                source = F.interpolate(
                    source[None], size=(image_size, image_size), mode="bilinear",
                    align_corners=False,
                )[0]
                target = F.interpolate(
                    target[None], size=(image_size, image_size), mode="bilinear",
                    align_corners=False,
                )[0]

            def scale_box(box, sx, sy):
                if box is None:
                    return None
                x0, y0, x1, y1 = box
                return (x0 * sx, y0 * sy, x1 * sx, y1 * sy)

            samples.append(
                PairSample(
                    source=source,
                    target=target,
                    keypoints=list(zip(src_pts, tgt_pts)),
                    category=rec.get("category", "object"),
                    bbox_source=scale_box(rec.get("bbox_source"), sx_s, sy_s),
                    bbox_target=scale_box(rec.get("bbox_target"), sx_t, sy_t),
                )
            )
    return samples


def write_manifest(records: List[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _save_png(image: torch.Tensor, path: Path) -> None:
    arr = (image.numpy().transpose(1, 2, 0) * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_dataset(samples: List[PairSample], out_dir: str | Path) -> Path:
    """Write images, per-pair flow arrays, and the JSONL manifest to disk."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "flows").mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(samples):
        src_rel = f"images/pair{i:04d}_src.png"
        tgt_rel = f"images/pair{i:04d}_tgt.png"
        _save_png(sample.source, out / src_rel)
        _save_png(sample.target, out / tgt_rel)
        if sample.flow is not None:
            np.save(out / "flows" / f"pair{i:04d}.npy", sample.flow.numpy())
        records.append(
            {
                "source_path": src_rel,
                "target_path": tgt_rel,
                "keypoints": {
                    "source": [[x, y] for (x, y), _ in sample.keypoints],
                    "target": [[x, y] for _, (x, y) in sample.keypoints],
                },
                "category": sample.category,
                "bbox_source": list(sample.bbox_source) if sample.bbox_source else None,
                "bbox_target": list(sample.bbox_target) if sample.bbox_target else None,
            }
        )
    write_manifest(records, out / "manifest.jsonl")
    return out / "manifest.jsonl"
