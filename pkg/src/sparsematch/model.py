"""Full correspondence network: backbone -> context encoder -> matcher -> flow."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .config import IMAGE_MEAN, IMAGE_STD, TrainConfig
from .encoder import ContextEncoder, DeskBackbone
from .matching import FlowField, _correlation, _mutual_nn, _soft_argmax, _upsample

__all__ = ["CorrespondenceNet", "build_model"]


class CorrespondenceNet(nn.Module):
    """End-to-end dense matcher predicting target-to-source flow.

    The matching head (correlation, mutual-NN filtering, upsampling, kernel
    soft-argmax) has no learnable parameters; only the backbone and the
    context-fusion layer train. Accepts pairs shaped [3, H, W] or batched
    [B, 3, H, W].
    """

    def __init__(
        self,
        kernel_size: int = 7,
        context_dim: int = 128,
        upsample_factor: int = 4,
        sigma: float = 5.0,
        tau: float = 0.02,
        seed: int = 0,
        backbone: Optional[nn.Module] = None,
        backbone_stages: int = 4,
    ):
        super().__init__()
        if backbone is None:
            backbone = DeskBackbone(seed=seed, stages=backbone_stages)
        self.backbone = backbone
        self.backbone_stride = getattr(self.backbone, "stride", 16)
        feat_dim = getattr(self.backbone, "out_channels", 128)
        self.encoder = ContextEncoder(feat_dim, kernel_size, context_dim, seed=seed + 1)
        self.upsample_factor = upsample_factor
        self.sigma = sigma
        self.tau = tau
        mean = torch.tensor(IMAGE_MEAN).view(3, 1, 1)
        std = torch.tensor(IMAGE_STD).view(3, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    @property
    def flow_stride(self) -> float:
        return self.backbone_stride / self.upsample_factor

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        normalized = (image - self.input_mean) / self.input_std
        return self.encoder(self.backbone(normalized))

    def correlate(self, image_src: torch.Tensor, image_tgt: torch.Tensor) -> torch.Tensor:
        corr = _correlation(self.encode(image_src), self.encode(image_tgt))
        corr = _mutual_nn(corr)
        return _upsample(corr, self.upsample_factor)

    def forward(self, image_src: torch.Tensor, image_tgt: torch.Tensor) -> torch.Tensor:
        """Images in [0, 1] (unnormalized) -> flow [(B,) 2, H_b, W_b] in pixels."""
        corr = self.correlate(image_src, image_tgt)
        return _soft_argmax(corr, self.sigma, self.tau, self.flow_stride)

    def predict_flow(self, image_src: torch.Tensor, image_tgt: torch.Tensor) -> FlowField:
        """Single-pair inference wrapper returning a typed flow field."""
        with torch.no_grad():
            values = self.forward(image_src, image_tgt)
        return FlowField(values, stride=self.flow_stride)

    def parameter_groups(self, lr_backbone: float, lr_rest: float):
        """Two optimizer groups: backbone vs everything else."""
        backbone_params = list(self.backbone.parameters())
        backbone_ids = {id(p) for p in backbone_params}
        rest = [p for p in self.parameters() if id(p) not in backbone_ids]
        return [
            {"params": backbone_params, "lr": lr_backbone},
            {"params": rest, "lr": lr_rest},
        ]


def build_model(cfg: TrainConfig, seed: Optional[int] = None) -> CorrespondenceNet:
    """Construct the network described by a TrainConfig (init seed overridable)."""
    return CorrespondenceNet(
        kernel_size=cfg.kernel_size,
        context_dim=cfg.context_dim,
        upsample_factor=cfg.upsample_factor,
        sigma=cfg.softargmax_sigma,
        tau=cfg.softargmax_temperature,
        seed=cfg.net_seed if seed is None else seed,
        backbone_stages=cfg.backbone_stages,
    )
