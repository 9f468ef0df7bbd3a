"""The full two-pathway segmentation network and its construction."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .blocks import initialize
from .errors import ConfigError, ShapeError
from .fusion import FusionConfig, FusionHead
from .medsam import BranchConfig, MedSAMBranch
from .unet import UNetBranch, UNetConfig

ABLATIONS = ("none", "unet-only")


@dataclass
class ModelConfig:
    image_size: int = 256
    branch: BranchConfig = field(default_factory=BranchConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ablation: str = "none"

    def validate(self):
        self.branch.validate()
        self.unet.validate()
        self.fusion.validate()
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"model.ablation must be one of {ABLATIONS}")
        if self.image_size % self.branch.patch_size:
            raise ConfigError(f"model.image_size={self.image_size} not divisible by patch_size={self.branch.patch_size}")
        if self.image_size % 2 ** (self.unet.levels - 1):
            raise ConfigError(f"model.image_size={self.image_size} not divisible by 2^(levels-1)")


def normalize_batch(img: torch.Tensor) -> torch.Tensor:
    """Per-image z-score over ``[B, 1, H, W]``; constant images become zero."""
    mu = img.mean(dim=(1, 2, 3), keepdim=True)
    sd = img.std(dim=(1, 2, 3), keepdim=True, unbiased=False)
    safe = torch.where(sd > 0, sd, torch.ones_like(sd))
    return torch.where(sd > 0, (img - mu) / safe, torch.zeros_like(img))


def _as_batch(img):
    if img.dim() == 2:
        img = img[None, None]
    elif img.dim() == 3:
        img = img[:, None]
    return img


class ScarNet(nn.Module):
    """logits = Head(MedSAM(norm(x)), UNet(norm(x))), shape ``[B, 4, H, W]``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        size = (cfg.image_size, cfg.image_size)
        self.medsam = MedSAMBranch(cfg.branch, size)
        self.unet = UNetBranch(cfg.unet)
        self.head = FusionHead(cfg.fusion, cfg.branch.out_channels, cfg.unet.out_channels)

    def forward(self, img, trace=None):
        x = normalize_batch(_as_batch(img))
        if x.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(f"model built for {self.cfg.image_size}px inputs, got {tuple(x.shape[-2:])}")
        f_sam = self.medsam(x)
        f_unet = self.unet(x)
        if trace is not None:
            trace.update(f_sam=f_sam, f_unet=f_unet)
        return self.head(f_sam, f_unet, trace=trace)


class UNetOnly(nn.Module):
    """Ablation: the convolutional pathway with a direct 1x1 class head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.unet = UNetBranch(cfg.unet)
        self.classifier = nn.Conv2d(cfg.unet.out_channels, cfg.fusion.num_classes, 1)

    def forward(self, img, trace=None):
        x = normalize_batch(_as_batch(img))
        return self.classifier(self.unet(x))


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> nn.Module:
    """Construct and deterministically initialize a model."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = UNetOnly(cfg) if cfg.ablation == "unet-only" else ScarNet(cfg)
        initialize(model)
        if isinstance(model, ScarNet):
            model.medsam.embed.reset_positions()
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def predict_probs(model, img) -> torch.Tensor:
    with torch.no_grad():
        return torch.softmax(model(img), dim=1)


def predict_mask(model, img) -> torch.Tensor:
    with torch.no_grad():
        return model(img).argmax(dim=1).to(torch.uint8)
