"""Lightweight prompt encoder and mask decoder.

Sparse prompts are the token-MLP of the multimodal class token plus one
zero-initialised learned token. The dense prompt (pseudo-mask on the decoder
grid) is projected per cell to ``C`` channels and added to the image features.
The decoder runs two rounds of token/feature cross-attention, then an object
token produces both a coarse stride-16 mask (bilinearly upsampled) and a
full-resolution refinement: decoder features are upsampled, summed with the
stage-1 encoder features (stride 4) and a per-pixel embedding of the input
image, and projected to per-pixel vectors that are dotted with the token.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .nn import (LayerNorm, Linear, MLP, MultiHeadCrossAttention, bilinear_resize,
                 embedding, gelu)


@dataclass
class PromptBundle:
    sparse: torch.Tensor  # [k, C]
    dense: torch.Tensor | None = None  # [h, w, C]


class PromptEncoder(nn.Module):
    def __init__(self, token_dim: int, dim: int):
        super().__init__()
        self.token_mlp = MLP(token_dim, dim, dim)
        self.learned = nn.Parameter(torch.zeros(1, dim))
        self.dense_proj = Linear(1, dim)

    def forward(self, v_cls: torch.Tensor, dense: torch.Tensor | None = None) -> PromptBundle:
        if v_cls.dim() != 2 or v_cls.shape[0] != 1:
            raise ValueError(f"class token must be [1, D], got {tuple(v_cls.shape)}")
        sparse = torch.cat([self.token_mlp(v_cls), self.learned])
        dense_emb = None
        if dense is not None:
            if dense.dim() != 2:
                raise ValueError(f"dense prompt must be a 2-d map, got {tuple(dense.shape)}")
            dense_emb = self.dense_proj(dense[..., None])
        return PromptBundle(sparse=sparse, dense=dense_emb)


class DecoderRound(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.tok_norm = LayerNorm(dim)
        self.tok_attn = MultiHeadCrossAttention(dim, n_heads=n_heads)
        self.mlp_norm = LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim)
        self.feat_norm = LayerNorm(dim)
        self.feat_attn = MultiHeadCrossAttention(dim, n_heads=n_heads)

    def forward(self, tokens, feats, pos):
        tokens = tokens + self.tok_attn(self.tok_norm(tokens), feats + pos)
        tokens = tokens + self.mlp(self.mlp_norm(tokens))
        feats = feats + self.feat_attn(self.feat_norm(feats) + pos, tokens)
        return tokens, feats


class MaskDecoder(nn.Module):
    def __init__(self, dim: int, grid: tuple[int, int], out_size: tuple[int, int],
                 hr_dim: int | None = None, pixel_dim: int | None = None, n_heads: int = 2,
                 hyper_dim: int = 8, rounds: int = 2, hr_stride: int = 4):
        super().__init__()
        self.grid = tuple(grid)
        self.out_size = tuple(out_size)
        self.hr_stride = hr_stride
        self.obj_token = embedding(1, dim)
        self.pos = embedding(grid[0] * grid[1], dim)
        self.rounds = nn.ModuleList(DecoderRound(dim, n_heads) for _ in range(rounds))
        self.tok_norm = LayerNorm(dim)
        self.feat_norm = LayerNorm(dim)
        self.hyper = MLP(dim, dim, hyper_dim)
        self.coarse_proj = Linear(dim, hyper_dim)
        self.hr_proj = nn.Sequential(LayerNorm(hr_dim), Linear(hr_dim, dim)) if hr_dim else None
        self.pix_proj = Linear(pixel_dim, dim) if pixel_dim else None
        self.out_proj = Linear(dim, hyper_dim)

    def forward(self, f_en: torch.Tensor, prompts: PromptBundle,
                high_res: torch.Tensor | None = None,
                image: torch.Tensor | None = None) -> torch.Tensor:
        """Mask logits ``[H_s, W_s]`` from ``F_en`` (``[h*w, C]``) and prompts.

        ``high_res`` is the stride-4 stage-1 feature grid and ``image`` the
        (normalised) input image; each is used only if the decoder was built
        with the matching projection.
        """
        gh, gw = self.grid
        H, W = self.out_size
        if f_en.shape != self.pos.shape:
            raise ValueError(f"features {tuple(f_en.shape)} do not match decoder grid {gh}x{gw}")
        feats = f_en
        if prompts.dense is not None:
            if prompts.dense.shape[:2] != (gh, gw):
                raise ValueError(f"dense prompt {tuple(prompts.dense.shape)} does not match grid {gh}x{gw}")
            feats = feats + prompts.dense.reshape(gh * gw, -1)
        tokens = torch.cat([self.obj_token, prompts.sparse])
        for rnd in self.rounds:
            tokens, feats = rnd(tokens, feats, self.pos)
        tokens, feats = self.tok_norm(tokens), self.feat_norm(feats)
        h = self.hyper(tokens[0])
        coarse = (self.coarse_proj(feats) @ h).reshape(gh, gw)
        up = feats.reshape(gh, gw, -1)
        if self.hr_proj is not None and high_res is not None:
            hs = (H // self.hr_stride, W // self.hr_stride)
            if tuple(high_res.shape[:2]) != hs:
                raise ValueError(f"high-res features {tuple(high_res.shape)} are not on the "
                                 f"stride-{self.hr_stride} grid {hs}")
            up = bilinear_resize(up, *hs) + self.hr_proj(high_res)
        up = bilinear_resize(up, H, W)
        if self.pix_proj is not None and image is not None:
            if tuple(image.shape[:2]) != (H, W):
                raise ValueError(f"image {tuple(image.shape)} does not match output size {H}x{W}")
            up = up + self.pix_proj(image)
        fine = self.out_proj(gelu(up)) @ h
        return bilinear_resize(coarse, H, W) + fine


def encode_prompts(v_cls, dense, encoder: PromptEncoder) -> PromptBundle:
    return encoder(v_cls, dense)


def decode_mask(f_en, prompts: PromptBundle, decoder: MaskDecoder, high_res=None,
                image=None) -> torch.Tensor:
    return decoder(f_en, prompts, high_res, image)
