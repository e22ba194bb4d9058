import numpy as np
import pytest
import torch

import oracles
from rrsis.mpg import MaskPromptGenerator, generate_pseudo_mask, resize_prompt


def test_shape(gen):
    mpg = MaskPromptGenerator(16, (8, 8), n_heads=2)
    out = mpg(torch.randn(1, 16, generator=gen), torch.randn(64, 16, generator=gen))
    assert out.logits.shape == (8, 8)


@pytest.mark.parametrize("use_mhca", [True, False])
def test_matches_oracle(gen, use_mhca):
    mpg = MaskPromptGenerator(16, (4, 6), n_heads=2, use_mhca=use_mhca)
    v_cls, v = torch.randn(1, 16, generator=gen), torch.randn(24, 16, generator=gen)
    ref = oracles.pseudo_mask(oracles.params(mpg), v_cls.numpy(), v.numpy(), (4, 6), 2, use_mhca)
    assert np.abs(mpg(v_cls, v).logits.detach().numpy() - ref).max() <= 1e-10


def test_zero_class_token_gives_constant_map(gen):
    mpg = MaskPromptGenerator(16, (8, 8))
    with torch.no_grad():
        mpg.cls_proj.bias.zero_()
    out = mpg(torch.zeros(1, 16), torch.randn(64, 16, generator=gen)).logits
    assert torch.equal(out, torch.full_like(out, out[0, 0].item()))


def test_unit_attention_makes_settings_agree(gen):
    mpg = MaskPromptGenerator(16, (8, 8))
    with torch.no_grad():
        mpg.attn.out_proj.weight.zero_()
        mpg.attn.out_proj.bias.fill_(1.0)
    v_cls, v = torch.randn(1, 16, generator=gen), torch.randn(64, 16, generator=gen)
    assert torch.equal(mpg(v_cls, v, use_mhca=True).logits, mpg(v_cls, v, use_mhca=False).logits)


def test_row_major_grid_order(gen):
    mpg = MaskPromptGenerator(4, (2, 3), use_mhca=False)
    v_cls, v = torch.randn(1, 4, generator=gen), torch.randn(6, 4, generator=gen)
    logits = mpg(v_cls, v).logits
    for k in range(6):
        single = mpg(v_cls, v[k:k + 1].expand(6, 4)).logits
        assert logits[k // 3, k % 3] == single[0, 0]


def test_rejects_bad_shapes(gen):
    mpg = MaskPromptGenerator(16, (8, 8))
    with pytest.raises(ValueError, match="grid"):
        mpg(torch.randn(1, 16), torch.randn(60, 16))
    with pytest.raises(ValueError, match="class token"):
        mpg(torch.randn(2, 16), torch.randn(64, 16))


def test_resize_prompt(gen):
    mpg = MaskPromptGenerator(16, (8, 8))
    mask = generate_pseudo_mask(torch.randn(1, 16, generator=gen), torch.randn(64, 16, generator=gen), mpg)
    up = resize_prompt(mask, 8, 8)
    assert torch.equal(up, mask.logits)
    up = resize_prompt(mask, 16, 16)
    assert up.shape == (16, 16) and mask.upsampled is up
    ref = oracles.bilinear(mask.logits.detach().numpy(), 16, 16)
    assert np.abs(up.detach().numpy() - ref).max() <= 1e-12
