"""Pseudo-mask generation from the multimodal class token and patch embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .nn import Linear, MLP, MultiHeadCrossAttention, bilinear_resize


@dataclass
class PseudoMask:
    logits: torch.Tensor  # [H_u/p, W_u/p]
    upsampled: torch.Tensor | None = None


class MaskPromptGenerator(nn.Module):
    """Coarse mask logits on the union-encoder patch grid.

    The class token attends over the patch embeddings, is gated by the result,
    projected, and broadcast-multiplied onto the patch grid; a D -> D/2 -> 1
    MLP turns each grid cell into a logit. ``use_mhca=False`` skips the
    attention gate and uses the class token as is.
    """

    def __init__(self, dim: int, grid: tuple[int, int], n_heads: int = 1, use_mhca: bool = True):
        super().__init__()
        self.grid = tuple(grid)
        self.use_mhca = use_mhca
        self.attn = MultiHeadCrossAttention(dim, n_heads=n_heads)
        self.cls_proj = Linear(dim, dim)
        self.mask_mlp = MLP(dim, dim // 2, 1)

    def forward(self, v_cls: torch.Tensor, v: torch.Tensor, use_mhca: bool | None = None) -> PseudoMask:
        use_mhca = self.use_mhca if use_mhca is None else use_mhca
        gh, gw = self.grid
        if v.shape[0] != gh * gw:
            raise ValueError(f"{v.shape[0]} patch embeddings do not form a {gh}x{gw} grid")
        if v_cls.shape != (1, v.shape[1]):
            raise ValueError(f"class token shape {tuple(v_cls.shape)} does not match embeddings")
        token = v_cls * self.attn(v_cls, v) if use_mhca else v_cls
        grid = v.reshape(gh, gw, -1) * self.cls_proj(token)
        return PseudoMask(logits=self.mask_mlp(grid)[..., 0])


def generate_pseudo_mask(v_cls: torch.Tensor, v: torch.Tensor, mpg: MaskPromptGenerator,
                         use_mhca: bool = True) -> PseudoMask:
    return mpg(v_cls, v, use_mhca)


def resize_prompt(mask: PseudoMask, h: int, w: int) -> torch.Tensor:
    mask.upsampled = bilinear_resize(mask.logits, h, w)
    return mask.upsampled
