"""Configuration dataclasses and config-file IO."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

# Per-channel statistics used to normalize images before the backbone.
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)

VARIANTS = ("baseline", "st", "mt")


@dataclass
class SelectionSchedule:
    """Linear ramp of the pseudo-label selection ratio over training epochs."""

    r_start: float = 0.2
    r_end: float = 0.9
    ramp_epochs: int = 10

    def __post_init__(self):
        if not (0.0 <= self.r_start <= self.r_end <= 1.0):
            raise ValueError(f"need 0 <= r_start <= r_end <= 1, got {self.r_start}, {self.r_end}")
        if self.ramp_epochs < 1:
            raise ValueError(f"ramp_epochs must be >= 1, got {self.ramp_epochs}")


@dataclass
class LossWeights:
    """Weighting between ground-truth loss and pseudo-label loss."""

    pseudo_weight: float = 10.0

    def __post_init__(self):
        if self.pseudo_weight < 0:
            raise ValueError(f"pseudo_weight must be >= 0, got {self.pseudo_weight}")


@dataclass
class TrainConfig:
    """Everything needed to build and train one model variant.

    ``seed`` is mandatory; every other field has a documented default.
    Learning-rate defaults assume a pretrained backbone; runs with the
    randomly initialized desk backbone typically raise both.
    """

    seed: int

    # data: either manifest paths or an in-memory synthetic set
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    synth_train: int = 0
    synth_val: int = 0
    synth_seed: int = 0
    image_size: int = 256
    keypoints_per_pair: int = 8

    # model
    kernel_size: int = 7          # self-similarity kernel K (odd)
    context_dim: int = 128        # fused feature channels d_g
    backbone_stages: int = 4      # desk backbone depth; stride = 2 ** stages
    upsample_factor: int = 4      # correlation upsampling, stride 16 -> 4
    softargmax_sigma: float = 5.0
    softargmax_temperature: float = 0.02

    # supervision
    dilation_kernel: int = 7
    schedule: SelectionSchedule = field(default_factory=SelectionSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    # gt-only epochs before the pseudo term activates; useful when networks
    # train from scratch and early flows are degenerate
    pseudo_warmup_epochs: int = 0

    # optimizer (AdamW)
    lr_backbone: float = 3e-6
    lr_rest: float = 3e-5
    weight_decay: float = 0.01
    adam_betas: Tuple[float, float] = (0.9, 0.999)

    # loop
    epochs: int = 30
    batch_size: int = 8
    variant: str = "baseline"
    jitter: float = 0.2           # color-jitter magnitude, 0 disables
    # Initialization seeds for the two mutual-teacher networks. Defaults are
    # derived from ``seed``; swapping them swaps the two networks' roles.
    mt_seeds: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if self.dilation_kernel < 1 or self.dilation_kernel % 2 == 0:
            raise ValueError(f"dilation_kernel must be odd and >= 1, got {self.dilation_kernel}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if isinstance(self.schedule, dict):
            self.schedule = SelectionSchedule(**self.schedule)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.mt_seeds is not None:
            self.mt_seeds = tuple(self.mt_seeds)
        if isinstance(self.adam_betas, list):
            self.adam_betas = tuple(self.adam_betas)

    # seed derivation: data order uses ``seed`` itself, network init uses
    # offsets so that baseline / ST-student / MT-net-s share the same init.
    @property
    def net_seed(self) -> int:
        return self.seed + 1

    @property
    def mt_init_seeds(self) -> Tuple[int, int]:
        if self.mt_seeds is not None:
            return self.mt_seeds
        return (self.seed + 1, self.seed + 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path: str) -> TrainConfig:
    """Load a TrainConfig from a JSON key-value document."""
    with open(path) as fh:
        data = json.load(fh)
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
