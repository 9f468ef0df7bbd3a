"""Transformer pathway: patch embedding, pre-norm transformer blocks, a
channel-reducing upsampling neck with SE recalibration, and ScarAttention."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SEBlock, ScarAttention, maybe_dropout, multi_head_attention, norm2d
from .errors import ConfigError, ShapeError


@dataclass
class BranchConfig:
    patch_size: int = 16
    d: int = 256
    L: int = 4
    num_heads: int = 8
    neck_channels: list = field(default_factory=lambda: [256, 128, 64, 32])
    se_reduction: int = 8
    dropout: float = 0.0

    def validate(self):
        p = self.patch_size
        if p < 1 or p & (p - 1):
            raise ConfigError(f"model.branch.patch_size must be a power of two, got {p}")
        if self.d % self.num_heads:
            raise ConfigError(f"model.branch.d={self.d} not divisible by num_heads={self.num_heads}")
        if self.L < 0:
            raise ConfigError("model.branch.L must be >= 0")
        if int(math.log2(p)) > len(self.neck_channels):
            raise ConfigError(f"neck has {len(self.neck_channels)} stages; patch {p} needs {int(math.log2(p))} doublings")
        for c in self.neck_channels:
            if c % self.se_reduction:
                raise ConfigError(f"neck channel {c} not divisible by se_reduction={self.se_reduction}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.branch.dropout must lie in [0, 1)")

    @property
    def out_channels(self):
        return self.neck_channels[-1]


def patchify(img: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``[B, 1, H, W]`` -> row-major ``[B, N, p*p]``."""
    b, c, h, w = img.shape
    if c != 1:
        raise ShapeError(f"expected a single-channel image, got {c} channels")
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = img.reshape(b, gh, patch_size, gw, patch_size).permute(0, 1, 3, 2, 4)
    return x.reshape(b, gh * gw, patch_size * patch_size)


class PatchEmbedding(nn.Module):
    """tokens = flatten(patch) @ W_embed + positional encoding."""

    def __init__(self, patch_size: int, d: int, num_patches: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size * patch_size, d, bias=False)
        self.pos = nn.Parameter(torch.zeros(num_patches, d))
        self.reset_positions()

    def reset_positions(self):
        with torch.no_grad():
            self.pos.normal_(0.0, 0.02)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # patches: [B, N, p, p] or [B, N, p*p]
        if patches.dim() == 4:
            if patches.shape[-2:] != (self.patch_size, self.patch_size):
                raise ShapeError(f"patches are {tuple(patches.shape[-2:])}, config expects {self.patch_size}x{self.patch_size}")
            patches = patches.flatten(2)
        if patches.shape[-1] != self.patch_size ** 2:
            raise ShapeError(f"flattened patch length {patches.shape[-1]} != {self.patch_size ** 2}")
        if patches.shape[1] != self.pos.shape[0]:
            raise ShapeError(f"{patches.shape[1]} patches but positional table holds {self.pos.shape[0]}")
        return self.proj(patches) + self.pos


class SelfAttention(nn.Module):
    def __init__(self, d: int, num_heads: int):
        super().__init__()
        if d % num_heads:
            raise ConfigError(f"d={d} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.last_weights = None

    def forward(self, x, keep_weights=False):
        out, weights = multi_head_attention(self.q(x), self.k(x), self.v(x), self.num_heads)
        if keep_weights:
            self.last_weights = weights.detach()
        return self.out(out)


class TransformerBlock(nn.Module):
    """z' = MHA(LN(z)) + z;  z_out = MLP(LN(z')) + z'."""

    def __init__(self, d: int, num_heads: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, num_heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))
        self.drop = maybe_dropout(dropout)

    def forward(self, z, keep_weights=False):
        z = self.attn(self.norm1(z), keep_weights=keep_weights) + z
        z = self.mlp(self.norm2(z)) + z
        return self.drop(z)


class NeckStage(nn.Module):
    def __init__(self, cin, cout, upsample: bool, se_reduction: int):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = norm2d(cout)
        self.act = nn.GELU()
        self.se = SEBlock(cout, se_reduction)

    def forward(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.se(self.act(self.norm(self.conv(x))))


class TransformerNeck(nn.Module):
    """Token grid -> full-resolution feature map, channels reduced stage by stage.

    The first log2(patch_size) stages double the spatial size, so the output
    always matches the input image resolution.
    """

    def __init__(self, d: int, channels, patch_size: int, se_reduction: int):
        super().__init__()
        doublings = int(math.log2(patch_size))
        stages, cin = [], d
        for i, cout in enumerate(channels):
            stages.append(NeckStage(cin, cout, i < doublings, se_reduction))
            cin = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, tokens, grid):
        b, n, d = tokens.shape
        rows, cols = grid
        if rows * cols != n:
            raise ShapeError(f"{n} tokens cannot form a {rows}x{cols} grid")
        x = tokens.transpose(1, 2).reshape(b, d, rows, cols)
        return self.stages(x)


class MedSAMBranch(nn.Module):
    """Image ``[B, 1, H, W]`` (already normalized) -> features ``[B, 32, H, W]``."""

    def __init__(self, cfg: BranchConfig, image_size=(256, 256)):
        super().__init__()
        cfg.validate()
        h, w = image_size
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ShapeError(f"image {h}x{w} is not divisible by patch size {cfg.patch_size}")
        self.cfg = cfg
        self.grid = (h // cfg.patch_size, w // cfg.patch_size)
        self.embed = PatchEmbedding(cfg.patch_size, cfg.d, self.grid[0] * self.grid[1])
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.num_heads, dropout=cfg.dropout) for _ in range(cfg.L))
        self.neck = TransformerNeck(cfg.d, cfg.neck_channels, cfg.patch_size, cfg.se_reduction)
        self.scar_attention = ScarAttention(cfg.out_channels, cfg.se_reduction)

    def encode(self, img, keep_weights=False):
        z = self.embed(patchify(img, self.cfg.patch_size))
        for block in self.blocks:
            z = block(z, keep_weights=keep_weights)
        return z

    def forward(self, img, keep_weights=False):
        z = self.encode(img, keep_weights=keep_weights)
        return self.scar_attention(self.neck(z, self.grid))
