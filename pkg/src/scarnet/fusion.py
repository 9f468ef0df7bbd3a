"""Fusion head: align the two pathways, cross-attend, gate, refine, classify."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import conv_norm_act, multi_head_attention, zero_init
from .errors import ConfigError, ShapeError

FUSION_MODES = ("gated", "concat")


@dataclass
class FusionConfig:
    common_channels: int = 64
    attn_grid: int = 32
    num_heads: int = 4
    num_classes: int = 4
    fusion_mode: str = "gated"

    def validate(self):
        if self.num_classes != 4:
            raise ConfigError("model.fusion.num_classes must be 4 (background, myocardium, blood pool, scar)")
        if self.common_channels % self.num_heads:
            raise ConfigError("model.fusion.common_channels must be divisible by num_heads")
        if self.attn_grid < 1:
            raise ConfigError("model.fusion.attn_grid must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"model.fusion.fusion_mode must be one of {FUSION_MODES}")


class AlignFeatures(nn.Module):
    """1x1 projections of both pathways onto a shared channel width."""

    def __init__(self, sam_channels, unet_channels, common):
        super().__init__()
        self.sam = nn.Conv2d(sam_channels, common, 1)
        self.unet = nn.Conv2d(unet_channels, common, 1)

    def forward(self, f_sam, f_unet):
        if f_sam.shape[-2:] != f_unet.shape[-2:]:
            raise ShapeError(f"pathway maps differ in size: {tuple(f_sam.shape[-2:])} vs {tuple(f_unet.shape[-2:])}")
        return self.sam(f_sam), self.unet(f_unet)


class CrossAttention(nn.Module):
    """SAM positions query UNet positions on a pooled grid; result is
    upsampled and added back onto the SAM features."""

    def __init__(self, channels, num_heads, grid):
        super().__init__()
        self.num_heads = num_heads
        self.grid = grid
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        self.last_weights = None

    def forward(self, f_sam, f_unet, keep_weights=False):
        b, c, h, w = f_sam.shape
        gh, gw = min(self.grid, h), min(self.grid, w)
        ps = F.adaptive_avg_pool2d(f_sam, (gh, gw)).flatten(2).transpose(1, 2)
        pu = F.adaptive_avg_pool2d(f_unet, (gh, gw)).flatten(2).transpose(1, 2)
        out, weights = multi_head_attention(self.q(ps), self.k(pu), self.v(pu), self.num_heads)
        if keep_weights:
            self.last_weights = weights.detach()
        out = self.out(out).transpose(1, 2).reshape(b, c, gh, gw)
        if (gh, gw) != (h, w):
            out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
        return f_sam + out


class DynamicFusion(nn.Module):
    """F = a * f_sam + (1 - a) * f_unet with a per-channel gate a in (0, 1)."""

    def __init__(self, channels):
        super().__init__()
        self.fc1 = nn.Linear(2 * channels, channels)
        self.fc2 = zero_init(nn.Linear(channels, channels))
        # tests clamp the gate to exact endpoints through this
        self.gate_override: Optional[float] = None

    def gate(self, f_sam, f_unet):
        if self.gate_override is not None:
            return torch.full(f_sam.shape[:2], float(self.gate_override), dtype=f_sam.dtype, device=f_sam.device)
        pooled = torch.cat([f_sam.mean(dim=(2, 3)), f_unet.mean(dim=(2, 3))], dim=1)
        return torch.sigmoid(self.fc2(F.gelu(self.fc1(pooled))))

    def forward(self, f_sam, f_unet):
        if f_sam.shape != f_unet.shape:
            raise ShapeError(f"fusion inputs differ: {tuple(f_sam.shape)} vs {tuple(f_unet.shape)}")
        a = self.gate(f_sam, f_unet)[:, :, None, None]
        return a * f_sam + (1 - a) * f_unet


class RefineClassify(nn.Module):
    def __init__(self, channels, num_classes):
        super().__init__()
        self.refine = conv_norm_act(channels, channels)
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, x):
        return self.classifier(x + self.refine(x))


class FusionHead(nn.Module):
    def __init__(self, cfg: FusionConfig, sam_channels=32, unet_channels=128):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.common_channels
        self.align = AlignFeatures(sam_channels, unet_channels, c)
        self.cross = CrossAttention(c, cfg.num_heads, cfg.attn_grid)
        if cfg.fusion_mode == "gated":
            self.fuse = DynamicFusion(c)
            self.head = RefineClassify(c, cfg.num_classes)
        else:
            # literal concat + 1x1 conv straight to class logits
            self.fuse = None
            self.head = nn.Conv2d(2 * c, cfg.num_classes, 1)

    def forward(self, f_sam, f_unet, trace: Optional[dict] = None):
        sam_a, unet_a = self.align(f_sam, f_unet)
        sam_x = self.cross(sam_a, unet_a)
        if self.fuse is None:
            fused = torch.cat([sam_x, unet_a], dim=1)
        else:
            fused = self.fuse(sam_x, unet_a)
        if trace is not None:
            trace.update(sam_aligned=sam_a, unet_aligned=unet_a, sam_attended=sam_x, fused=fused)
        return self.head(fused)
