"""Finite-difference gradient checks for every trainable component.

Each check builds a module from the run configuration, draws random inputs,
and reduces the module output to a scalar with a fixed random weighting.
For every parameter tensor (and every differentiable input) the autograd
gradient ``g`` is compared with a central difference of the scalar along a
few random unit directions ``d``::

    fd = (f(p + h d) - f(p - h d)) / 2h      vs.      <g, d>

The relative error is ``|fd - <g, d>| / max(|fd|, |<g, d>|, floor * |g|)``
where ``|g|`` is the norm of the whole case gradient. The floor matters for
tensors whose true gradient is zero, e.g. attention key biases, to which
softmax is invariant; there only rounding noise is left to compare.

Finite differences are always taken in float64. In float32 mode the analytic
gradients come from a float32 copy of the same case, so the check measures
how far float32 autograd is from the exact derivative at the same point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .bhfm import FusionLayer, HierarchicalFusion
from .config import RunConfig
from .head import MaskDecoder, PromptEncoder
from .image_encoder import HierarchicalImageEncoder
from .losses import SentenceWeight, ce_loss, dice_loss, tbl_loss
from .mpg import MaskPromptGenerator, resize_prompt
from .union_encoder import UnionEncoder

FD_STEP = 1e-5
REL_FLOOR = 1e-4


@dataclass
class GradCase:
    """A scalar function of named leaf tensors."""

    name: str
    fn: Callable[[], torch.Tensor]
    leaves: dict[str, torch.Tensor]


@dataclass
class CheckResult:
    module: str
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""


def _weighted(out, gen: torch.Generator) -> torch.Tensor:
    """Reduce a tensor (or nested tuple of tensors) to a scalar with random weights."""
    if isinstance(out, torch.Tensor):
        w = torch.randn(out.shape, generator=gen, dtype=torch.float64).to(out.dtype)
        return (out * w).sum()
    return sum(_weighted(o, gen) for o in out)


def _scalar(module_fn, seed: int):
    def fn():
        gen = torch.Generator().manual_seed(seed + 1)
        return _weighted(module_fn(), gen)
    return fn


def _leaves(module: torch.nn.Module, inputs: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    leaves = {n: p for n, p in module.named_parameters() if p.requires_grad}
    for n, x in inputs.items():
        leaves[f"<input:{n}>"] = x.requires_grad_(True)
    return leaves


def build_cases(cfg: RunConfig, seed: int = 0, dtype: torch.dtype = torch.float64) -> list[GradCase]:
    """One case per component, sized by ``cfg``.

    Everything is drawn in float64 and then cast, so cases built for
    different dtypes hold the same values up to rounding.
    """
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        return _build_cases(cfg, seed, dtype)
    finally:
        torch.set_default_dtype(previous)


def _build_cases(cfg: RunConfig, seed: int, dtype: torch.dtype) -> list[GradCase]:
    gen = torch.Generator().manual_seed(seed)

    def rand(*shape, scale=1.0):
        return (scale * torch.randn(*shape, generator=gen)).to(dtype)

    ucfg = cfg.union_config()
    ecfg = cfg.encoder_config()
    text_dim = cfg["text.dim"]
    cases = []

    torch.manual_seed(seed)
    union = UnionEncoder(ucfg).to(dtype)
    u_img = rand(ucfg.image_size, ucfg.image_size, 3)
    ids = torch.tensor([0, 3, 7, 11, 1])
    cases.append(GradCase("union_encoder", _scalar(lambda: _union_out(union, u_img, ids), seed),
                          _leaves(union, {"image": u_img})))

    n_t = 5
    layer = FusionLayer(ecfg.widths[0], text_dim, ecfg.heads[0]).to(dtype)
    g0 = ecfg.grid(0) // 4  # a reduced grid keeps the isolated layer check fast
    f, f_in, t = rand(g0 * g0, ecfg.widths[0]), rand(g0 * g0, ecfg.widths[0]), rand(n_t, text_dim)
    coeffs = cfg.fusion_coeffs()
    cases.append(GradCase("bhfm_layer", _scalar(lambda: layer(f, t, f_in, coeffs), seed),
                          _leaves(layer, {"f": f, "f_in": f_in, "t": t})))

    encoder = HierarchicalImageEncoder(ecfg).to(dtype)
    encoder.set_frozen(False)
    fusion = HierarchicalFusion(ecfg.widths, ecfg.heads, ucfg.dim, text_dim, ecfg.out_dim,
                                cfg.fusion_variant(), coeffs, cfg["head.heads"]).to(dtype)
    e_img = rand(ecfg.image_size, ecfg.image_size, 3)
    e_txt = rand(n_t, ucfg.dim)

    def encode():
        pyramid, t_out = encoder(e_img, e_txt, fusion)
        g = ecfg.grid(3)
        f_en = fusion.guide(pyramid.final.reshape(g * g, -1), e_txt)
        return (*pyramid.stages, f_en) + ((t_out,) if t_out is not None else ())

    enc_leaves = _leaves(encoder, {})
    enc_leaves.update({f"bhfm.{n}": p for n, p in fusion.named_parameters()})
    enc_leaves.update({"<input:image>": e_img.requires_grad_(True),
                       "<input:text>": e_txt.requires_grad_(True)})
    cases.append(GradCase("image_encoder+bhfm", _scalar(encode, seed), enc_leaves))

    g = ucfg.grid
    mpg = MaskPromptGenerator(ucfg.dim, (g, g), cfg["mpg.heads"], cfg["mpg.use_mhca"]).to(dtype)
    v_cls, v = rand(1, ucfg.dim), rand(g * g, ucfg.dim)
    gd = ecfg.grid(3)
    cases.append(GradCase("mpg", _scalar(lambda: resize_prompt(mpg(v_cls, v), gd, gd), seed),
                          _leaves(mpg, {"v_cls": v_cls, "v": v})))

    head_size = ecfg.image_size // 2  # decoder correctness does not depend on extent
    hg = head_size // 16
    prompt = PromptEncoder(ucfg.dim, ecfg.out_dim).to(dtype)
    decoder = MaskDecoder(ecfg.out_dim, (hg, hg), (head_size, head_size),
                          hr_dim=ecfg.widths[0] if cfg["head.high_res"] else None,
                          pixel_dim=3 if cfg["head.pixel_skip"] else None,
                          n_heads=cfg["head.heads"], hyper_dim=cfg["head.hyper_dim"]).to(dtype)
    f_en, h_cls, dense = rand(hg * hg, ecfg.out_dim), rand(1, ucfg.dim), rand(hg, hg)
    high_res = rand(head_size // 4, head_size // 4, ecfg.widths[0])
    image = rand(head_size, head_size, 3)

    def head():
        return decoder(f_en, prompt(h_cls, dense), high_res, image)

    head_leaves = {f"prompt.{n}": p for n, p in prompt.named_parameters()}
    head_leaves.update({f"decoder.{n}": p for n, p in decoder.named_parameters()})
    head_leaves.update({f"<input:{k}>": x.requires_grad_(True) for k, x in
                        (("f_en", f_en), ("v_cls", h_cls), ("dense", dense),
                         ("high_res", high_res), ("image", image))})
    cases.append(GradCase("sam2_head", _scalar(head, seed), head_leaves))

    size = 12
    gt = (torch.rand(size, size, generator=gen, dtype=torch.float64) > 0.5).to(dtype)
    logits = rand(size, size, scale=2.0)
    cases.append(GradCase("loss_ce", lambda: ce_loss(logits, gt), {"<input:logits>": logits.requires_grad_(True)}))
    probs = torch.sigmoid(rand(size, size))
    cases.append(GradCase("loss_dice", lambda: dice_loss(probs, gt), {"<input:probs>": probs.requires_grad_(True)}))
    weight = SentenceWeight(ucfg.dim).to(dtype)
    with torch.no_grad():
        weight.proj.bias.fill_(0.3)
    t_emb = rand(n_t, ucfg.dim)
    pred = torch.sigmoid(rand(size, size))
    tbl_leaves = _leaves(weight, {"pred": pred, "t": t_emb})
    cases.append(GradCase("loss_tbl", lambda: tbl_loss(pred, gt, weight(t_emb)), tbl_leaves))
    return cases


def _union_out(union, image, ids):
    e = union(image, ids)
    return e.v_cls, e.v, e.t


def check_case(case: GradCase, n_dirs: int = 2, seed: int = 0,
               corrupt: Callable[[str, torch.Tensor], torch.Tensor] | None = None,
               reference: GradCase | None = None) -> CheckResult:
    """Compare autograd and finite differences for every leaf of ``case``.

    Finite differences are evaluated on ``reference`` (a float64 twin of
    ``case``) when given, else on ``case`` itself. ``corrupt(name, grad)`` may
    replace an analytic gradient before comparison, which is how the detector
    itself is tested.
    """
    ref = reference or case
    names = list(case.leaves)
    tensors = [case.leaves[n] for n in names]
    value = case.fn()
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(tensors, grads)]
    if corrupt is not None:
        grads = [corrupt(n, g) for n, g in zip(names, grads)]
    grads = [g.double() for g in grads]
    scale = float(torch.sqrt(sum((g ** 2).sum() for g in grads)))
    gen = torch.Generator().manual_seed(seed + 7)
    result = CheckResult(case.name)
    for name, g in zip(names, grads):
        x = ref.leaves[name]
        worst = 0.0
        for _ in range(n_dirs):
            d = torch.randn(x.shape, generator=gen, dtype=torch.float64)
            d = d / d.norm()
            with torch.no_grad():
                base = x.clone()
                x.copy_(base + FD_STEP * d)
                plus = ref.fn().item()
                x.copy_(base - FD_STEP * d)
                minus = ref.fn().item()
                x.copy_(base)
            fd = (plus - minus) / (2 * FD_STEP)
            an = float((g * d).sum())
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), REL_FLOOR * scale, 1e-300))
        result.errors[name] = worst
    return result


def run_gradcheck(cfg: RunConfig, dtype: torch.dtype = torch.float64, seed: int = 0,
                  n_dirs: int = 2, corrupt=None, modules=None) -> list[CheckResult]:
    """Check every component; ``dtype`` selects the precision of the analytic pass."""
    cases = build_cases(cfg, seed, torch.float64)
    low = build_cases(cfg, seed, dtype) if dtype != torch.float64 else [None] * len(cases)
    results = []
    for case, low_case in zip(cases, low):
        if modules and case.name not in modules:
            continue
        if low_case is None:
            results.append(check_case(case, n_dirs, seed, corrupt))
            continue
        with torch.no_grad():  # evaluate the reference at the rounded point
            for name, x in low_case.leaves.items():
                case.leaves[name].copy_(x.double())
        previous = torch.get_default_dtype()
        torch.set_default_dtype(dtype)
        try:
            results.append(check_case(low_case, n_dirs, seed, corrupt, reference=case))
        finally:
            torch.set_default_dtype(previous)
    return results


def format_results(results: list[CheckResult], tolerance: float) -> str:
    lines = [f"{'module':<20} {'max rel err':>12} {'tensors':>8}  status  worst"]
    for r in results:
        status = "ok" if r.max_error <= tolerance else "FAIL"
        lines.append(f"{r.module:<20} {r.max_error:>12.3e} {len(r.errors):>8}  {status:<6}  {r.worst()}")
    return "\n".join(lines)
