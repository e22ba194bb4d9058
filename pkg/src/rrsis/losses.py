"""Segmentation objective: cross-entropy + DICE + text-guided boundary loss.

CE works on logits; DICE and the boundary term work on sigmoid
probabilities. Boundary maps are sums of absolute horizontal and vertical
neighbour differences, zero-padded on the trailing edge so they keep the
mask shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .nn import Linear

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    dice: float = 0.1
    tbl: float = 0.2

    def __post_init__(self):
        for name in ("ce", "dice", "tbl"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _check_binary(gt: torch.Tensor) -> None:
    if not bool(((gt == 0) | (gt == 1)).all()):
        raise ValueError("ground-truth mask must contain only 0 and 1")


def ce_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if logits.shape != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and mask {tuple(gt.shape)} differ")
    _check_binary(gt)
    gt = gt.to(logits.dtype)
    return (logits.clamp(min=0) - logits * gt + torch.log1p(torch.exp(-logits.abs()))).mean()


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    gt = gt.to(probs.dtype)
    return 1 - (2 * (probs * gt).sum() + eps) / (probs.sum() + gt.sum() + eps)


def gradient_map(m: torch.Tensor) -> torch.Tensor:
    m = m.to(torch.get_default_dtype()) if not m.is_floating_point() else m
    absd_h = F.pad((m[:, 1:] - m[:, :-1]).abs(), (0, 1))
    absd_v = F.pad((m[1:] - m[:-1]).abs(), (0, 0, 0, 1))
    return absd_h + absd_v


def tbl_loss(pred: torch.Tensor, gt: torch.Tensor, weight: torch.Tensor | float) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and mask {tuple(gt.shape)} differ")
    diff = gradient_map(pred) - gradient_map(gt.to(pred.dtype))
    return ((weight * diff) ** 2).mean()


def sentence_embedding(t: torch.Tensor) -> torch.Tensor:
    """Mean of the word-token rows (drops the leading class and trailing end token)."""
    if t.shape[0] < 3:
        raise ValueError("text embeddings need at least one word between the special tokens")
    return t[1:-1].mean(dim=0, keepdim=True)


class SentenceWeight(nn.Module):
    """Scalar boundary weight ``Linear(T_s)``, used without any squashing."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = Linear(dim, 1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.proj(sentence_embedding(t)).reshape(())


def total_loss(logits: torch.Tensor, gt: torch.Tensor, text_weight: torch.Tensor | float,
               weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    probs = torch.sigmoid(logits)
    terms = {
        "ce": ce_loss(logits, gt),
        "dice": dice_loss(probs, gt),
        "tbl": tbl_loss(probs, gt, text_weight),
    }
    total = weights.ce * terms["ce"] + weights.dice * terms["dice"] + weights.tbl * terms["tbl"]
    return total, terms
