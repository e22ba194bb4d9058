"""Differentiable building blocks shared by every model component.

Everything here works on unbatched tensors (the training loop runs at batch
size 1). Conventions used throughout the package:

* GeLU is the tanh approximation.
* Attention scales logits by ``1/sqrt(head_dim)`` and has no dropout.
* Resizing is bilinear with ``align_corners=False`` and edge clamping.
* Linear weights start uniform in ``±1/sqrt(d_in)`` with zero bias; learned
  embeddings start normal with std 0.02.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input last extent is {x.shape[-1]}, weight expects {weight.shape[1]}"
        )
    return F.linear(x, weight, bias)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Scaled dot-product attention over already-projected ``[N, d]`` inputs."""
    nq, d = q.shape
    nk = k.shape[0]
    hd = d // n_heads
    qh = q.reshape(nq, n_heads, hd).transpose(0, 1)
    kh = k.reshape(nk, n_heads, hd).transpose(0, 1)
    vh = v.reshape(nk, n_heads, hd).transpose(0, 1)
    weights = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(hd), dim=-1)
    return (weights @ vh).transpose(0, 1).reshape(nq, d)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        bound = 1.0 / math.sqrt(d_in)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)

    def extra_repr(self) -> str:
        return f"{self.d_in} -> {self.d_out}"


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadCrossAttention(nn.Module):
    """Multi-head attention with separate query and key/value sources.

    ``q`` is ``[N_q, q_dim]`` and ``kv`` is ``[N_kv, kv_dim]``; both are projected
    to ``dim`` (split over ``n_heads``) and the result is projected to
    ``out_dim``. The caller adds any residual.
    """

    def __init__(self, q_dim: int, kv_dim: int | None = None, dim: int | None = None,
                 n_heads: int = 1, out_dim: int | None = None):
        super().__init__()
        kv_dim = q_dim if kv_dim is None else kv_dim
        dim = q_dim if dim is None else dim
        out_dim = q_dim if out_dim is None else out_dim
        if n_heads < 1 or dim % n_heads:
            raise ValueError(f"attention dim {dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q_proj = Linear(q_dim, dim)
        self.k_proj = Linear(kv_dim, dim)
        self.v_proj = Linear(kv_dim, dim)
        self.out_proj = Linear(dim, out_dim)

    @property
    def head_dim(self) -> int:
        return self.q_proj.d_out // self.n_heads

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if q.dim() != 2 or kv.dim() != 2:
            raise ValueError(f"attention expects 2-d inputs, got {tuple(q.shape)} and {tuple(kv.shape)}")
        out = attention(self.q_proj(q), self.k_proj(kv), self.v_proj(kv), self.n_heads)
        return self.out_proj(out)


def mhca(q: torch.Tensor, kv: torch.Tensor, attn: MultiHeadCrossAttention) -> torch.Tensor:
    return attn(q, kv)


class MLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int | None = None):
        super().__init__()
        self.fc1 = Linear(d_in, hidden)
        self.fc2 = Linear(hidden, d_in if d_out is None else d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block followed by a GeLU MLP."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadCrossAttention(dim, n_heads=n_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


def embedding(*shape: int) -> nn.Parameter:
    param = nn.Parameter(torch.empty(*shape))
    nn.init.normal_(param, std=0.02)
    return param


def patchify(image: torch.Tensor, p: int) -> torch.Tensor:
    """Split ``[H, W, C]`` into ``[H*W/p^2, p*p*C]`` rows.

    Blocks are taken in row-major order; inside a block pixels are row-major
    with channels innermost.
    """
    if image.dim() != 3:
        raise ValueError(f"patchify expects [H, W, C], got {tuple(image.shape)}")
    h, w, c = image.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide image size {h}x{w}")
    x = image.reshape(h // p, p, w // p, p, c).permute(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


def unpatchify(patches: torch.Tensor, h: int, w: int, p: int) -> torch.Tensor:
    c = patches.shape[1] // (p * p)
    x = patches.reshape(h // p, w // p, p, p, c).permute(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


def bilinear_resize(m: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Resize a ``[h, w]`` map or ``[h, w, C]`` feature grid."""
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    if tuple(m.shape[:2]) == (h, w):
        return m
    if m.dim() == 2:
        out = F.interpolate(m[None, None], size=(h, w), mode="bilinear", align_corners=False)
        return out[0, 0]
    out = F.interpolate(m.permute(2, 0, 1)[None], size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0)


def merge_patches(grid: torch.Tensor) -> torch.Tensor:
    """``[h, w, c]`` -> ``[h/2, w/2, 4c]`` by stacking each 2x2 neighbourhood."""
    h, w, c = grid.shape
    x = grid.reshape(h // 2, 2, w // 2, 2, c).permute(0, 2, 1, 3, 4)
    return x.reshape(h // 2, w // 2, 4 * c)

