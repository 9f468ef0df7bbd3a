"""Focal Tversky, soft Dice and class-weighted cross-entropy, and their
weighted sum used as the training objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, LabelError, ShapeError

FOREGROUND = (1, 3)  # myocardium, scar


@dataclass
class LossWeights:
    dice: float = 0.2
    focal_tversky: float = 0.2
    cross_entropy: float = 0.1
    # background, myocardium, blood pool, scar
    class_weights: list = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    tversky_gamma: float = 0.75
    epsilon: float = 1e-6

    def validate(self):
        for name in ("dice", "focal_tversky", "cross_entropy"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")
        if len(self.class_weights) != 4 or any(c < 0 for c in self.class_weights):
            raise ConfigError("loss.class_weights needs 4 non-negative values")
        if self.tversky_alpha < 0 or self.tversky_beta < 0 or self.tversky_alpha + self.tversky_beta <= 0:
            raise ConfigError("loss.tversky_alpha/beta must be >= 0 with a positive sum")
        if self.tversky_gamma <= 0:
            raise ConfigError("loss.tversky_gamma must be > 0")
        if self.epsilon <= 0:
            raise ConfigError("loss.epsilon must be > 0")


def soft_probs(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the class axis of ``[..., 4, H, W]`` logits."""
    return torch.softmax(logits, dim=-3)


def _check_pair(p, g):
    if p.shape != g.shape:
        raise ShapeError(f"prediction {tuple(p.shape)} and target {tuple(g.shape)} differ")


def _sum(x, dims):
    return x.sum() if dims is None else x.sum(dim=dims)


def tversky_index(p, g, alpha, beta, eps, dims=None):
    tp = _sum(p * g, dims)
    fp = _sum(p * (1 - g), dims)
    fn = _sum((1 - p) * g, dims)
    return (tp + eps) / (tp + alpha * fp + beta * fn + eps)


def focal_tversky_loss(p, g, w: LossWeights = LossWeights(), dims=None):
    """(1 - TI)^gamma for one class probability map ``p`` and binary mask ``g``."""
    _check_pair(p, g)
    ti = tversky_index(p, g, w.tversky_alpha, w.tversky_beta, w.epsilon, dims)
    return torch.clamp(1 - ti, min=0.0) ** w.tversky_gamma


def dice_loss(p, g, w: LossWeights = LossWeights(), dims=None):
    _check_pair(p, g)
    inter = _sum(p * g, dims)
    return 1 - (2 * inter + w.epsilon) / (_sum(p, dims) + _sum(g, dims) + w.epsilon)


def _check_labels(labels, num_classes):
    if labels.dtype.is_floating_point:
        raise LabelError("labels must be an integer tensor")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes - 1}], "
                         f"found range [{int(labels.min())}, {int(labels.max())}]")


def weighted_cross_entropy(probs, labels, w: LossWeights = LossWeights()):
    """-(1/HW) sum_pixels w_c log p_c, averaged over the batch.

    ``probs`` is ``[B, C, H, W]`` (or ``[C, H, W]``), ``labels`` the matching
    integer map.
    """
    if probs.dim() == 3:
        probs, labels = probs[None], labels[None]
    num_classes = probs.shape[1]
    _check_labels(labels, num_classes)
    if labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"labels {tuple(labels.shape)} do not match probabilities {tuple(probs.shape)}")
    idx = labels.long()[:, None]
    p_true = probs.gather(1, idx)[:, 0]
    cw = torch.as_tensor(w.class_weights, dtype=probs.dtype, device=probs.device)[labels.long()]
    per_pixel = -cw * torch.log(p_true.clamp_min(w.epsilon))
    return per_pixel.flatten(1).mean(dim=1).mean()


def one_hot(labels, num_classes=4, dtype=torch.float32):
    _check_labels(labels, num_classes)
    return F.one_hot(labels.long(), num_classes).movedim(-1, -3).to(dtype)


def combined_loss(logits, labels, w: LossWeights = LossWeights(), foreground=FOREGROUND):
    """Weighted objective and its components.

    FTL and Dice are evaluated per image and per foreground class, then
    averaged; cross-entropy covers every class.
    """
    if logits.dim() == 3:
        logits, labels = logits[None], labels[None]
    probs = soft_probs(logits)
    onehot = one_hot(labels, probs.shape[1], probs.dtype)
    fg = list(foreground)
    p, g = probs[:, fg], onehot[:, fg]
    ftl = focal_tversky_loss(p, g, w, dims=(2, 3)).mean()
    dl = dice_loss(p, g, w, dims=(2, 3)).mean()
    ce = weighted_cross_entropy(probs, labels, w)
    total = w.focal_tversky * ftl + w.dice * dl + w.cross_entropy * ce
    return total, {"total": total, "dice": dl, "ftl": ftl, "ce": ce}
