"""Joint image-text encoder producing aligned visual/text embeddings.

A small stand-in for a BEiT-3 style union encoder: image patches and word
tokens are embedded, concatenated into one sequence and mixed by plain joint
self-attention. The output sequence is split back into the multimodal class
token, the patch embeddings and the text embeddings.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .nn import Linear, LayerNorm, TransformerBlock, embedding, patchify

SPECIAL_TOKENS = ("[CLS]", "[EOS]", "[UNK]")
CLS_ID, EOS_ID, UNK_ID = 0, 1, 2

_PUNCT = re.compile(r"[^\w\s]")


class Vocabulary:
    """Closed word vocabulary; ids 0/1/2 are the class, end and unknown tokens."""

    def __init__(self, words):
        self.tokens = list(SPECIAL_TOKENS)
        for word in words:
            if word not in self.tokens:
                self.tokens.append(word)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:3]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: first three lines must be {', '.join(SPECIAL_TOKENS)}")
        if len(set(lines)) != len(lines):
            raise ValueError(f"{path}: duplicate vocabulary entries")
        return cls(lines[3:])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) < 3 or self.ids[0] != CLS_ID or self.ids[-1] != EOS_ID:
            raise ValueError(f"token sequence must be [CLS] words... [EOS], got {self.ids}")

    @property
    def n_words(self) -> int:
        return len(self.ids) - 2

    def __len__(self) -> int:
        return len(self.ids)

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor(self.ids, dtype=torch.long)


def normalize_text(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    words = normalize_text(text)
    if not words:
        raise ValueError("cannot tokenize empty text")
    return TokenSequence((CLS_ID, *(vocab.id(w) for w in words), EOS_ID))


@dataclass(frozen=True)
class UnionConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 16

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide {self.image_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @classmethod
    def reference_scale(cls) -> "UnionConfig":
        # 224x224 input, D=1024, 24 layers; XLM-R sized vocabulary
        return cls(image_size=224, patch_size=16, dim=1024, depth=24, heads=16,
                   vocab_size=250002, max_text_len=64)


@dataclass
class UnionEmbeddings:
    v_cls: torch.Tensor  # [1, D]
    v: torch.Tensor  # [N_p, D]
    t: torch.Tensor  # [N_t, D]

    @property
    def sequence_length(self) -> int:
        return self.v_cls.shape[0] + self.v.shape[0] + self.t.shape[0]


class UnionEncoder(nn.Module):
    def __init__(self, cfg: UnionConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = Linear(p * p * 3, cfg.dim)
        self.cls_token = embedding(1, cfg.dim)
        self.vis_pos = embedding(cfg.n_patches + 1, cfg.dim)
        self.tok_embed = embedding(cfg.vocab_size, cfg.dim)
        self.text_pos = embedding(cfg.max_text_len + 2, cfg.dim)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = LayerNorm(cfg.dim)

    def forward(self, image: torch.Tensor, ids: torch.Tensor) -> UnionEmbeddings:
        cfg = self.cfg
        if tuple(image.shape) != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(f"union encoder expects a {cfg.image_size}x{cfg.image_size}x3 image, "
                             f"got {tuple(image.shape)}")
        n_t = ids.shape[0]
        if n_t > cfg.max_text_len + 2:
            raise ValueError(f"text has {n_t - 2} words, maximum is {cfg.max_text_len}")
        if int(ids.max()) >= cfg.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id outside the vocabulary")
        patches = self.patch_embed(patchify(image, cfg.patch_size))
        v0 = torch.cat([self.cls_token, patches]) + self.vis_pos
        t0 = self.tok_embed[ids] + self.text_pos[:n_t]
        u = torch.cat([v0, t0])
        for block in self.blocks:
            u = block(u)
        u = self.norm(u)
        n_p = cfg.n_patches
        return UnionEmbeddings(v_cls=u[:1], v=u[1:1 + n_p], t=u[1 + n_p:])
