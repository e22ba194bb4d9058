"""Four-stage hierarchical image encoder (strides 4, 8, 16, 16).

Stage 1 embeds 4x4 patches, stages 2 and 3 merge 2x2 neighbourhoods, and
stage 4 keeps the stride. Each stage is a stack of pre-norm transformer
blocks. When a :class:`~rrsis.bhfm.HierarchicalFusion` is passed in, its layer
``i`` runs on the output of stage ``i`` and the fused features feed stage
``i + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .nn import LayerNorm, Linear, TransformerBlock, embedding, merge_patches, patchify

STRIDES = (4, 8, 16, 16)


@dataclass(frozen=True)
class EncoderStageConfig:
    image_size: int = 128
    widths: tuple[int, ...] = (16, 32, 64, 64)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (1, 2, 4, 4)
    out_dim: int = 32
    frozen: bool = False

    def __post_init__(self):
        for name in ("widths", "blocks", "heads"):
            if len(getattr(self, name)) != len(STRIDES):
                raise ValueError(f"encoder needs exactly {len(STRIDES)} {name}")
        if self.image_size % 16:
            raise ValueError(f"encoder image size {self.image_size} is not divisible by 16")
        for w, h in zip(self.widths, self.heads):
            if w % 2 or (w // 2) % h or w % h:
                raise ValueError(f"stage width {w} is incompatible with {h} heads")

    def grid(self, stage: int) -> int:
        return self.image_size // STRIDES[stage]


@dataclass
class FeaturePyramid:
    stages: list[torch.Tensor]  # per-stage [h_i, w_i, c_i], after fusion
    final: torch.Tensor  # F_n, [H/16, W/16, C]

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.final.shape[:2])


class HierarchicalImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderStageConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.patch_embed = Linear(4 * 4 * 3, w[0])
        self.pos = embedding(cfg.grid(0) ** 2, w[0])
        self.down = nn.ModuleList([
            nn.Identity(),
            nn.Sequential(LayerNorm(4 * w[0]), Linear(4 * w[0], w[1])),
            nn.Sequential(LayerNorm(4 * w[1]), Linear(4 * w[1], w[2])),
            Linear(w[2], w[3]) if w[2] != w[3] else nn.Identity(),
        ])
        self.stages = nn.ModuleList(
            nn.ModuleList(TransformerBlock(w[i], cfg.heads[i]) for _ in range(cfg.blocks[i]))
            for i in range(len(STRIDES))
        )
        self.neck = nn.Sequential(LayerNorm(w[3]), Linear(w[3], cfg.out_dim))
        self.set_frozen(cfg.frozen)

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.requires_grad_(not frozen)

    def _stage_input(self, i: int, image: torch.Tensor, prev: torch.Tensor | None) -> torch.Tensor:
        g = self.cfg.grid(i)
        if i == 0:
            return self.patch_embed(patchify(image, 4)) + self.pos
        if STRIDES[i] != STRIDES[i - 1]:
            return self.down[i](merge_patches(prev.reshape(2 * g, 2 * g, -1)).reshape(g * g, -1))
        return self.down[i](prev)

    def forward(self, image: torch.Tensor, text: torch.Tensor | None = None,
                fusion=None) -> tuple[FeaturePyramid, torch.Tensor | None]:
        """Encode ``[H, W, 3]``; returns the pyramid and the final text state."""
        s = self.cfg.image_size
        if image.dim() != 3 or image.shape[0] % 16 or image.shape[1] % 16:
            raise ValueError(f"image extents must be divisible by 16, got {tuple(image.shape)}")
        if tuple(image.shape) != (s, s, 3):
            raise ValueError(f"encoder configured for {s}x{s}x3 input, got {tuple(image.shape)}")
        use_fusion = fusion is not None and fusion.active
        t = fusion.project_text(text) if use_fusion else text
        stages = []
        x = None
        for i, blocks in enumerate(self.stages):
            f_in = self._stage_input(i, image, x)
            f = f_in
            for block in blocks:
                f = block(f)
            if use_fusion:
                f, t = fusion.layer(i, f, t, f_in)
            x = f
            g = self.cfg.grid(i)
            stages.append(f.reshape(g, g, -1))
        g = self.cfg.grid(3)
        final = self.neck(x).reshape(g, g, -1)
        return FeaturePyramid(stages=stages, final=final), t
