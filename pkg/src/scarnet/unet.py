"""Convolutional pathway: 5-level encoder, 4-level decoder with gated skips."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SpatialGate, maybe_dropout, norm2d
from .errors import ConfigError, ShapeError


@dataclass
class UNetConfig:
    base_channels: int = 64
    levels: int = 5
    skip_attention: bool = True
    dropout: float = 0.0

    def validate(self):
        if self.base_channels < 1:
            raise ConfigError("model.unet.base_channels must be >= 1")
        if self.levels < 2:
            raise ConfigError("model.unet.levels must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.unet.dropout must lie in [0, 1)")

    @property
    def encoder_channels(self):
        # base * 2^(i-1): 64, 128, 256, 512, 1024 at defaults
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    @property
    def decoder_channels(self):
        """Channels of d_{levels-1} .. d_1 (512, 512, 256, 128 at defaults)."""
        b, n = self.base_channels, self.levels
        top = b * 2 ** (n - 2)
        return [top] + [b * 2 ** i for i in range(n - 2, 0, -1)]

    @property
    def out_channels(self):
        return self.decoder_channels[-1]


class DoubleConv(nn.Module):
    """Two {3x3 conv, instance norm, GELU} blocks; spatial size preserved."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = norm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = norm2d(cout)
        self.act = nn.GELU()

    def forward(self, x):
        x = self.act(self.norm1(self.conv1(x)))
        return self.act(self.norm2(self.conv2(x)))


class UNetBranch(nn.Module):
    def __init__(self, cfg: UNetConfig, in_channels: int = 1):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        enc = cfg.encoder_channels
        dec = cfg.decoder_channels
        self.encoders = nn.ModuleList()
        cin = in_channels
        for c in enc:
            self.encoders.append(DoubleConv(cin, c))
            cin = c
        # decoder modules stored top (d_{n-1}) to bottom (d_1)
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.drops = nn.ModuleList()
        below = enc[-1]
        for j, cout in enumerate(dec):
            skip = enc[len(enc) - 2 - j]
            self.ups.append(nn.ConvTranspose2d(below, skip, kernel_size=2, stride=2))
            self.gates.append(SpatialGate() if cfg.skip_attention else nn.Identity())
            self.decoders.append(DoubleConv(2 * skip, cout))
            self.drops.append(maybe_dropout(cfg.dropout))
            below = cout

    def encode(self, x):
        n = self.cfg.levels
        h, w = x.shape[-2:]
        if h % 2 ** (n - 1) or w % 2 ** (n - 1):
            raise ShapeError(f"image {h}x{w} is not divisible by 2^{n - 1}")
        feats = [self.encoders[0](x)]
        for enc in self.encoders[1:]:
            feats.append(enc(F.max_pool2d(feats[-1], 2)))
        return feats

    def decode(self, feats):
        n = self.cfg.levels
        if len(feats) != n:
            raise ShapeError(f"expected {n} encoder maps, got {len(feats)}")
        x = feats[-1]
        for j in range(n - 1):
            level = n - 1 - j
            skip = feats[level - 1]
            up = self.ups[j](x)
            if up.shape[-2:] != skip.shape[-2:]:
                raise ShapeError(
                    f"decoder level {level}: upsampled {tuple(up.shape[-2:])} vs skip {tuple(skip.shape[-2:])}")
            x = self.decoders[j](torch.cat([up, self.gates[j](skip)], dim=1))
            x = self.drops[j](x)
        return x

    def forward(self, x):
        return self.decode(self.encode(x))
