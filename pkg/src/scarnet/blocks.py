"""Layers shared by the transformer pathway, the convolutional pathway and the fusion head."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


def zero_init(layer: nn.Module) -> nn.Module:
    """Mark a layer whose weights start at zero (gate outputs)."""
    layer._zero_init = True
    return layer


def _fan_in(m: nn.Module) -> int:
    w = m.weight
    if isinstance(m, nn.Linear):
        return w.shape[1]
    k = math.prod(w.shape[2:])
    if isinstance(m, nn.ConvTranspose2d):
        # each output pixel sees in_channels * k / stride^2 inputs
        return max(1, w.shape[0] * k // math.prod(m.stride))
    return w.shape[1] * k


def initialize(model: nn.Module) -> nn.Module:
    """Fan-in scaled uniform weights, zero biases, zero gate outputs."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = _fan_in(m)
            # conv layers feed GELU; linear layers mostly feed attention / residuals
            gain = math.sqrt(2.0) if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) else 1.0
            bound = gain * math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound)
                if m.bias is not None:
                    m.bias.zero_()
        if getattr(m, "_zero_init", False):
            with torch.no_grad():
                for p in m.parameters(recurse=False):
                    p.zero_()
    return model


def norm2d(channels: int) -> nn.Module:
    # instance-style statistics: independent of batch composition
    return nn.InstanceNorm2d(channels, affine=True)


def conv_norm_act(cin, cout, kernel=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=kernel // 2),
        norm2d(cout),
        nn.GELU(),
    )


def maybe_dropout(rate: float) -> nn.Module:
    return nn.Dropout(rate) if rate > 0 else nn.Identity()


def multi_head_attention(q, k, v, num_heads: int):
    """Scaled dot-product attention over ``[B, N, D]`` projections.

    Returns the concatenated head outputs ``[B, Nq, D]`` and the attention
    weights ``[B, heads, Nq, Nk]``.
    """
    b, nq, d = q.shape
    nk = k.shape[1]
    if d % num_heads:
        raise ConfigError(f"embedding dim {d} is not divisible by {num_heads} heads")
    dh = d // num_heads
    q = q.reshape(b, nq, num_heads, dh).transpose(1, 2)
    k = k.reshape(b, nk, num_heads, dh).transpose(1, 2)
    v = v.reshape(b, nk, num_heads, dh).transpose(1, 2)
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(b, nq, d)
    return out, weights


class SEBlock(nn.Module):
    """Squeeze-and-excitation: rescale each channel by a learned gate in (0, 1)."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"SE block: {channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = zero_init(nn.Linear(hidden, channels))

    def gate(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None]


class SpatialGate(nn.Module):
    """Sigmoid spatial gate from the channel-wise mean and max maps."""

    def __init__(self):
        super().__init__()
        self.conv = zero_init(nn.Conv2d(2, 1, kernel_size=1))

    def attention(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x):
        return x * self.attention(x)


class ScarAttention(nn.Module):
    """Channel recalibration followed by a spatial reweighting gate."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.se = SEBlock(channels, reduction)
        self.spatial = SpatialGate()

    def forward(self, x):
        return self.spatial(self.se(x))
