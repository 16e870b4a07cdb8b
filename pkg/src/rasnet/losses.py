"""Cross entropy + log soft-Jaccard training loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, ValidationError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    smoothing_eps: float = 1e-7

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha", "must be >= 0")
        if self.smoothing_eps <= 0:
            raise ConfigError("smoothing_eps", "must be > 0")


@dataclass
class LossBreakdown:
    h: torch.Tensor
    j: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {"h": self.h.item(), "j": self.j.item(), "total": self.total.item()}


def _check(logits, labels):
    if logits.dim() != 4:
        raise ShapeError(f"logits must be [B,C,H,W], got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ShapeError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValidationError(
            f"label ids must lie in [0, {logits.shape[1]}), found "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def cross_entropy(logits, labels):
    """Mean over batch and pixels of -log softmax(logits)[true class]."""
    _check(logits, labels)
    return F.cross_entropy(logits, labels.long(), reduction="mean")


def soft_jaccard(probs, labels, eps=1e-7):
    """Probability-weighted Jaccard averaged over foreground classes present in ``labels``.

    With one-hot ``probs`` this is the counting TP/(TP+FP+FN) per class. If
    no foreground class is present the result is 1.
    """
    if probs.dim() != 4 or labels.shape != (probs.shape[0],) + tuple(probs.shape[2:]):
        raise ShapeError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} disagree")
    onehot = F.one_hot(labels.long(), probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    union = probs.sum(dims) + onehot.sum(dims) - inter
    scores = (inter + eps) / (union + eps)
    present = onehot.sum(dims) > 0
    present[0] = False
    if not bool(present.any()):
        return torch.ones((), dtype=probs.dtype, device=probs.device)
    return scores[present].mean()


def combined_loss(logits, labels, config: LossConfig = LossConfig()) -> LossBreakdown:
    h = cross_entropy(logits, labels)
    j = soft_jaccard(torch.softmax(logits, dim=1), labels, config.smoothing_eps)
    if config.alpha == 0:
        total = h
    else:
        total = h - config.alpha * torch.log(j)
    return LossBreakdown(h=h, j=j, total=total)
