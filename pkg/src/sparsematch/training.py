"""Training protocols: sparse-label baseline, single offline teacher (two
stage), and mutual online teachers (one stage), with validation-based model
selection and JSONL epoch logs."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import TrainConfig
from .datakit import PairSample, augment_pair, load_manifest, synth_warp_pairs
from .evalkit import EvalReport, evaluate
from .model import CorrespondenceNet, build_model
from .supervision import build_label_mask, dilate_mask, select_small_loss, selection_ratio

__all__ = [
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "prepare_data",
    "train_baseline",
    "train_single_offline_teacher",
    "train_mutual_online_teachers",
    "validate",
]

CHECKPOINT_VERSION = 1
VAL_SEED_OFFSET = 1_000_003  # keeps synthetic val streams disjoint from train


@dataclass
class Checkpoint:
    """Model weights plus enough context to rebuild and resume evaluation."""

    state_dict: dict
    config: dict
    epoch: int
    val_pck: float
    format_version: int = CHECKPOINT_VERSION
    history: List[dict] = field(default_factory=list)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    torch.save(
        {
            "format_version": ckpt.format_version,
            "state_dict": ckpt.state_dict,
            "config": ckpt.config,
            "epoch": ckpt.epoch,
            "val_pck": ckpt.val_pck,
            "history": ckpt.history,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(path, weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('format_version')}")
    return Checkpoint(
        state_dict=payload["state_dict"],
        config=payload["config"],
        epoch=payload["epoch"],
        val_pck=payload["val_pck"],
        format_version=payload["format_version"],
        history=payload.get("history", []),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> CorrespondenceNet:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build_model(cfg)
    model.load_state_dict(ckpt.state_dict)
    return model


def prepare_data(cfg: TrainConfig) -> Tuple[List[PairSample], List[PairSample]]:
    """Resolve the config's data source into (train, val) sample lists."""
    if cfg.train_manifest:
        train = load_manifest(cfg.train_manifest, cfg.image_size)
        val = load_manifest(cfg.val_manifest, cfg.image_size) if cfg.val_manifest else []
    elif cfg.synth_train > 0:
        train = synth_warp_pairs(
            cfg.synth_seed, cfg.synth_train, cfg.image_size, cfg.keypoints_per_pair
        )
        val = synth_warp_pairs(
            cfg.synth_seed + VAL_SEED_OFFSET, cfg.synth_val, cfg.image_size,
            cfg.keypoints_per_pair,
        ) if cfg.synth_val > 0 else []
    else:
        raise ValueError("config provides neither manifests nor a synthetic dataset size")
    if not train:
        raise ValueError("training dataset is empty")
    return train, val


@dataclass
class _Supervision:
    mask: torch.Tensor          # [H, W]
    flow_gt: torch.Tensor       # [2, H, W]
    mask_dilated: torch.Tensor  # [H, W]


def _build_supervision(
    samples: Sequence[PairSample], grid: Tuple[int, int], stride: float, dilation_k: int
) -> List[_Supervision]:
    cache = []
    for i, sample in enumerate(samples):
        mask, flow_gt = build_label_mask(sample.keypoints, grid, stride)
        if mask.sum().item() == 0:
            warnings.warn(f"sample {i} has an empty label mask; it contributes no loss")
        cache.append(_Supervision(mask, flow_gt, dilate_mask(mask, dilation_k)))
    return cache


def _masked_l2_batch(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor):
    """Per-cell masked L2 over [B, 2, H, W]; returns (per_cell [B, H, W], per-pair means)."""
    diff = pred - target
    sq = (diff * diff).sum(dim=1)
    pos = sq > 0
    dist = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    per_cell = dist * mask
    counts = mask.sum(dim=(1, 2))
    sums = per_cell.sum(dim=(1, 2))
    means = torch.where(counts > 0, sums / counts.clamp(min=1.0), torch.zeros_like(sums))
    return per_cell, means


def _selected_pseudo_means(
    per_cell: torch.Tensor, dilated: torch.Tensor, ratio: float
) -> torch.Tensor:
    """Mean of the selected smallest-loss cells, per pair in the batch."""
    means = []
    for b in range(per_cell.shape[0]):
        idx = select_small_loss(per_cell[b], dilated[b], ratio)
        if idx.numel() == 0:
            means.append(per_cell[b].sum() * 0.0)
        else:
            means.append(per_cell[b].reshape(-1)[idx].mean())
    return torch.stack(means)


class _Trainer:
    """Shared loop machinery: batching, augmentation, optimizer, logging."""

    def __init__(self, cfg: TrainConfig, train: List[PairSample], val: List[PairSample]):
        self.cfg = cfg
        self.train_samples = train
        self.val_samples = val
        probe = build_model(cfg)
        stride = probe.flow_stride
        grid_n = int(round(cfg.image_size / stride))
        self.grid = (grid_n, grid_n)
        self.stride = stride
        self.supervision = _build_supervision(train, self.grid, stride, cfg.dilation_kernel)

    def make_optimizer(self, model: CorrespondenceNet) -> torch.optim.AdamW:
        return torch.optim.AdamW(
            model.parameter_groups(self.cfg.lr_backbone, self.cfg.lr_rest),
            betas=self.cfg.adam_betas,
            weight_decay=self.cfg.weight_decay,
        )

    def epoch_batches(self, epoch: int):
        order = np.random.default_rng([self.cfg.seed, 31337, epoch]).permutation(
            len(self.train_samples)
        )
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            yield [int(i) for i in order[start : start + bs]]

    def batch_images(self, indices: List[int], epoch: int):
        """Stacked (possibly jittered) image pairs; co-trained networks share
        one view per step, which keeps the two mutual per-cell losses
        symmetric."""
        pairs = []
        for i in indices:
            sample = self.train_samples[i]
            if self.cfg.jitter > 0:
                rng = np.random.default_rng([self.cfg.seed, 977, epoch, i])
                sample = augment_pair(sample, self.cfg.jitter, rng)
            pairs.append(sample)
        src = torch.stack([p.source for p in pairs])
        tgt = torch.stack([p.target for p in pairs])
        return src, tgt

    def batch_supervision(self, indices: List[int]):
        masks = torch.stack([self.supervision[i].mask for i in indices])
        gts = torch.stack([self.supervision[i].flow_gt for i in indices])
        dilated = torch.stack([self.supervision[i].mask_dilated for i in indices])
        return masks, gts, dilated

    def validation_pck(self, model: CorrespondenceNet) -> float:
        if not self.val_samples:
            return 0.0
        report = evaluate(model, self.val_samples, alphas=[0.1], basis="img")
        return report.overall[0.1]


def _snapshot(model: CorrespondenceNet) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _run_training(
    cfg: TrainConfig,
    data: Optional[Tuple[List[PairSample], List[PairSample]]],
    teacher_ckpt: Optional[Checkpoint] = None,
    mutual: bool = False,
    log_dir: Optional[str | Path] = None,
):
    """Single generic loop driving all three protocols.

    Returns one best-validation Checkpoint per trained network (one entry
    for baseline/ST, two for MT), each carrying its epoch history.
    """
    torch.manual_seed(cfg.seed)
    teacher = None
    if teacher_ckpt is not None:
        t_cfg = TrainConfig.from_dict(teacher_ckpt.config)
        mismatch = [
            name
            for name in ("image_size", "upsample_factor", "backbone_stages")
            if getattr(t_cfg, name) != getattr(cfg, name)
        ]
        if mismatch:
            raise ValueError(f"teacher/student configuration mismatch on {mismatch}")
        teacher = model_from_checkpoint(teacher_ckpt)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    train, val = data if data is not None else prepare_data(cfg)
    if not train:
        raise ValueError("training dataset is empty")
    trainer = _Trainer(cfg, train, val)
    lam = cfg.weights.pseudo_weight

    if mutual:
        seeds = cfg.mt_init_seeds
        models = [build_model(cfg, seed=seeds[0]), build_model(cfg, seed=seeds[1])]
    else:
        models = [build_model(cfg)]

    optimizers = [trainer.make_optimizer(m) for m in models]
    best = [
        {"state": _snapshot(m), "epoch": 0, "val_pck": float("-inf")} for m in models
    ]
    histories: List[List[dict]] = [[] for _ in models]
    pseudo_enabled = (teacher is not None or mutual) and lam > 0

    if cfg.epochs == 0:
        for mi, model in enumerate(models):
            best[mi] = {"state": _snapshot(model), "epoch": 0,
                        "val_pck": trainer.validation_pck(model)}

    for epoch in range(cfg.epochs):
        # an untrained peer/teacher gives degenerate pseudo-labels; the warmup
        # keeps the first epochs ground-truth only
        use_pseudo = pseudo_enabled and epoch >= cfg.pseudo_warmup_epochs
        ratio = selection_ratio(epoch, cfg.schedule) if use_pseudo else None
        sums = [{"total": 0.0, "gt": 0.0, "pseudo": 0.0} for _ in models]
        n_pairs = 0
        for indices in trainer.epoch_batches(epoch):
            masks, gts, dilated = trainer.batch_supervision(indices)
            src, tgt = trainer.batch_images(indices, epoch)
            n_pairs += len(indices)
            for m in models:
                m.train()
            flows = [m(src, tgt) for m in models]

            pseudos: List[Optional[torch.Tensor]] = [None for _ in models]
            if use_pseudo:
                if mutual:
                    pseudos = [flows[1].detach(), flows[0].detach()]
                else:
                    with torch.no_grad():
                        pseudos = [teacher(src, tgt)]

            for mi, model in enumerate(models):
                _, gt_means = _masked_l2_batch(flows[mi], gts, masks)
                loss = gt_means.mean()
                pseudo_mean_val = 0.0
                if use_pseudo:
                    per_cell = _masked_l2_batch(flows[mi], pseudos[mi], dilated)[0]
                    pseudo_means = _selected_pseudo_means(per_cell, dilated, ratio)
                    loss = (gt_means + lam * pseudo_means).mean()
                    pseudo_mean_val = pseudo_means.detach().sum().item()
                optimizers[mi].zero_grad(set_to_none=True)
                loss.backward()
                sums[mi]["gt"] += gt_means.detach().sum().item()
                sums[mi]["pseudo"] += pseudo_mean_val
                sums[mi]["total"] += loss.detach().item() * len(indices)
            for opt in optimizers:
                opt.step()

        for mi, model in enumerate(models):
            val_pck = trainer.validation_pck(model)
            record = {
                "epoch": epoch,
                "train_loss": sums[mi]["total"] / n_pairs,
                "gt_loss": sums[mi]["gt"] / n_pairs,
                "pseudo_loss": sums[mi]["pseudo"] / n_pairs,
                "R": ratio,
                "val_pck": val_pck,
            }
            histories[mi].append(record)
            if val_pck > best[mi]["val_pck"]:
                best[mi] = {"state": _snapshot(model), "epoch": epoch, "val_pck": val_pck}

    results = []
    for mi in range(len(models)):
        ckpt = Checkpoint(
            state_dict=best[mi]["state"],
            config=cfg.to_dict(),
            epoch=best[mi]["epoch"],
            val_pck=best[mi]["val_pck"],
            history=histories[mi],
        )
        results.append(ckpt)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        names = ["log.jsonl"] if len(models) == 1 else ["log_s.jsonl", "log_t.jsonl"]
        for name, history in zip(names, histories):
            with open(log_dir / name, "w") as fh:
                for record in history:
                    fh.write(json.dumps(record) + "\n")
    return results


def train_baseline(
    cfg: TrainConfig,
    data: Optional[Tuple[List[PairSample], List[PairSample]]] = None,
    log_dir: Optional[str | Path] = None,
) -> Checkpoint:
    """Train on sparse ground-truth annotations only; return the best-validation model."""
    return _run_training(cfg, data, log_dir=log_dir)[0]


def train_single_offline_teacher(
    cfg: TrainConfig,
    teacher: Checkpoint,
    data: Optional[Tuple[List[PairSample], List[PairSample]]] = None,
    log_dir: Optional[str | Path] = None,
) -> Checkpoint:
    """Stage two of the offline-teacher protocol.

    A fresh student is trained against the frozen teacher's dense flow
    predictions (mask-dilated, loss-selected) plus the sparse ground truth.
    """
    return _run_training(cfg, data, teacher_ckpt=teacher, log_dir=log_dir)[0]


def train_mutual_online_teachers(
    cfg: TrainConfig,
    data: Optional[Tuple[List[PairSample], List[PairSample]]] = None,
    log_dir: Optional[str | Path] = None,
) -> Tuple[Checkpoint, Checkpoint, Checkpoint]:
    """One-stage co-training of two networks on each other's detached flows.

    Both networks share the dilated label mask and run their own small-loss
    selection. Returns (net_s, net_t, selected) where selected is the one
    with the higher validation PCK (ties favor net_s).
    """
    ckpt_s, ckpt_t = _run_training(cfg, data, mutual=True, log_dir=log_dir)
    selected = ckpt_s if ckpt_s.val_pck >= ckpt_t.val_pck else ckpt_t
    return ckpt_s, ckpt_t, selected


def validate(
    ckpt: Checkpoint,
    data: Sequence[PairSample],
    alphas: Sequence[float] = (0.05, 0.1, 0.15),
    basis: str = "img",
) -> EvalReport:
    """Deterministic, augmentation-free PCK report for a checkpoint."""
    model = model_from_checkpoint(ckpt)
    return evaluate(model, data, alphas=alphas, basis=basis)
