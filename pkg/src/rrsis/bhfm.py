"""Bidirectional hierarchical fusion between encoder features and text.

One :class:`FusionLayer` sits after every image-encoder stage. It enhances the
stage output with text through cross-attention and, in the bidirectional
structure, updates the text stream with visual context. After the encoder,
:class:`TextGuidance` modulates the final feature map with the union-encoder
text embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .nn import LayerNorm, Linear, MLP, MultiHeadCrossAttention, gelu


class Structure(str, Enum):
    BI = "bi"
    UNI = "uni"
    LINEAR = "linear"
    OFF = "off"


@dataclass(frozen=True)
class FusionVariant:
    structure: Structure = Structure.BI
    use_post_guidance: bool = True
    use_layers: bool = True

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure(self.structure))
        if self.structure is Structure.OFF:
            object.__setattr__(self, "use_post_guidance", False)
            object.__setattr__(self, "use_layers", False)


@dataclass(frozen=True)
class FusionCoeffs:
    alpha_t: float = 0.2
    alpha_i: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha_t <= 1.0:
            raise ValueError(f"alpha_t must lie in [0, 1], got {self.alpha_t}")
        if self.alpha_i < 0.0:
            raise ValueError(f"alpha_i must be non-negative, got {self.alpha_i}")


class FusionLayer(nn.Module):
    """Fusion step for one encoder stage with ``channels`` image channels.

    Image features are squeezed to ``channels // 2`` and text is projected to
    the same width so the two can attend to each other. ``img_restore`` is the
    single linear map that brings the attended image features back to
    ``channels`` before they are summed with the stage input and output.
    """

    def __init__(self, channels: int, text_dim: int, n_heads: int = 1, mlp_ratio: int = 2):
        super().__init__()
        r = channels // 2
        self.img_down = Linear(channels, r)
        self.txt_proj = Linear(text_dim, r)
        self.img_attn = MultiHeadCrossAttention(r, r, r, n_heads)
        self.txt_attn = MultiHeadCrossAttention(r, r, r, n_heads)
        self.txt_restore = Linear(r, text_dim)
        self.img_restore = Linear(r, channels)
        self.norm = LayerNorm(channels)
        self.mlp = MLP(channels, mlp_ratio * channels)
        self.gate_down = Linear(channels, r)
        self.gate_up = Linear(r, channels)

    def forward(self, f: torch.Tensor, t: torch.Tensor, f_in: torch.Tensor,
                coeffs: FusionCoeffs = FusionCoeffs(),
                structure: Structure = Structure.BI) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(F_out, T_next)`` for stage output ``f`` and stage input ``f_in``."""
        structure = Structure(structure)
        if structure is Structure.OFF:
            raise ValueError("fusion layer called with structure 'off'")
        if f.shape != f_in.shape:
            raise ValueError(f"stage output {tuple(f.shape)} and input {tuple(f_in.shape)} differ")
        f1 = gelu(self.img_down(f))
        if structure is Structure.LINEAR:
            f2 = f1
            t_next = t
        else:
            t1 = self.txt_proj(t)
            f2 = self.img_attn(f1, t1) + f1
            if structure is Structure.BI:
                t2 = self.txt_attn(t1, f1) + t1
                t_next = (1 - coeffs.alpha_t) * t + coeffs.alpha_t * self.txt_restore(t2)
            else:
                t_next = t
        f3 = f_in + self.img_restore(f2) + f
        gated = self.gate_up(gelu(self.gate_down(f3)))
        f_out = f3 + self.mlp(self.norm(f3)) + coeffs.alpha_i * gated
        return f_out, t_next


class TextGuidance(nn.Module):
    """``F_en = F * MHCA(F, T)`` with the visual feature as query."""

    def __init__(self, channels: int, text_dim: int, n_heads: int = 1):
        super().__init__()
        self.attn = MultiHeadCrossAttention(channels, text_dim, channels, n_heads)

    def forward(self, f: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return f * self.attn(f, t)


class HierarchicalFusion(nn.Module):
    """All fusion parameters: text entry projection, per-stage layers, guidance."""

    def __init__(self, widths, heads, text_in_dim: int, text_dim: int, out_dim: int,
                 variant: FusionVariant = FusionVariant(), coeffs: FusionCoeffs = FusionCoeffs(),
                 guidance_heads: int = 1):
        super().__init__()
        self.variant = variant
        self.coeffs = coeffs
        self.text_in = Linear(text_in_dim, text_dim)
        self.layers = nn.ModuleList(FusionLayer(c, text_dim, h) for c, h in zip(widths, heads))
        self.guidance = TextGuidance(out_dim, text_in_dim, guidance_heads)

    @property
    def active(self) -> bool:
        return self.variant.use_layers

    def project_text(self, t: torch.Tensor) -> torch.Tensor:
        return self.text_in(t)

    def layer(self, i: int, f: torch.Tensor, t: torch.Tensor, f_in: torch.Tensor):
        return self.layers[i](f, t, f_in, self.coeffs, self.variant.structure)

    def guide(self, f: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if not self.variant.use_post_guidance:
            return f
        return self.guidance(f, t)


def post_encode_guidance(f: torch.Tensor, t: torch.Tensor, guidance: TextGuidance) -> torch.Tensor:
    return guidance(f, t)
