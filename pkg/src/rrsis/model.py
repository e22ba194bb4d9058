"""End-to-end referring segmenter assembled from the component modules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bhfm import HierarchicalFusion
from .config import RunConfig
from .data import build_vocabulary
from .head import MaskDecoder, PromptEncoder
from .image_encoder import HierarchicalImageEncoder
from .losses import SentenceWeight
from .mpg import MaskPromptGenerator, PseudoMask, resize_prompt
from .nn import bilinear_resize
from .union_encoder import UnionEmbeddings, UnionEncoder, Vocabulary, tokenize

PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


@dataclass
class ModelOutput:
    logits: torch.Tensor  # [H_s, W_s]
    text_weight: torch.Tensor  # scalar boundary-loss weight
    embeddings: UnionEmbeddings
    pseudo_mask: PseudoMask | None
    f_en: torch.Tensor


class ReferringSegmenter(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None):
        super().__init__()
        self.vocab = vocab or build_vocabulary()
        ucfg = cfg.union_config(len(self.vocab))
        ecfg = cfg.encoder_config()
        variant = cfg.fusion_variant()
        self.mpg_enabled = cfg["mpg.enabled"]
        self.union = UnionEncoder(ucfg)
        self.encoder = HierarchicalImageEncoder(ecfg)
        self.bhfm = HierarchicalFusion(ecfg.widths, ecfg.heads, ucfg.dim, cfg["text.dim"],
                                       ecfg.out_dim, variant, cfg.fusion_coeffs(),
                                       guidance_heads=cfg["head.heads"])
        self.mpg = MaskPromptGenerator(ucfg.dim, (ucfg.grid, ucfg.grid), cfg["mpg.heads"],
                                       cfg["mpg.use_mhca"])
        self.prompt = PromptEncoder(ucfg.dim, ecfg.out_dim)
        g = ecfg.grid(3)
        self.decoder = MaskDecoder(ecfg.out_dim, (g, g), (ecfg.image_size, ecfg.image_size),
                                   hr_dim=ecfg.widths[0] if cfg["head.high_res"] else None,
                                   pixel_dim=3 if cfg["head.pixel_skip"] else None,
                                   n_heads=cfg["head.heads"], hyper_dim=cfg["head.hyper_dim"])
        self.text_weight = SentenceWeight(ucfg.dim)

    def tokenize(self, text: str) -> torch.Tensor:
        return tokenize(text, self.vocab).as_tensor()

    def forward(self, image: torch.Tensor, ids: torch.Tensor) -> ModelOutput:
        x = (image - PIXEL_MEAN) / PIXEL_STD
        u = self.union.cfg.image_size
        emb = self.union(bilinear_resize(x, u, u), ids)
        pyramid, _ = self.encoder(x, emb.t, self.bhfm)
        gh, gw = pyramid.grid
        f_en = self.bhfm.guide(pyramid.final.reshape(gh * gw, -1), emb.t)
        pseudo = None
        dense = None
        if self.mpg_enabled:
            pseudo = self.mpg(emb.v_cls, emb.v)
            dense = resize_prompt(pseudo, gh, gw)
        prompts = self.prompt(emb.v_cls, dense)
        high_res = pyramid.stages[0] if self.decoder.hr_proj is not None else None
        logits = self.decoder(f_en, prompts, high_res, x)
        return ModelOutput(logits=logits, text_weight=self.text_weight(emb.t),
                           embeddings=emb, pseudo_mask=pseudo, f_en=f_en)

    def predict(self, image: np.ndarray, expression: str) -> np.ndarray:
        with torch.no_grad():
            out = self(to_tensor(image), self.tokenize(expression))
        return (out.logits > 0).numpy()


def to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(image), dtype=torch.get_default_dtype())


def build_model(cfg: RunConfig, vocab: Vocabulary | None = None) -> ReferringSegmenter:
    torch.manual_seed(cfg["seed"])
    return ReferringSegmenter(cfg, vocab)
