import numpy as np
import pytest
import torch

import oracles
from rrsis.head import MaskDecoder, PromptBundle, PromptEncoder, decode_mask, encode_prompts


def _head(hr=True, pix=True, grid=(4, 4), out=(32, 32)):
    prompt = PromptEncoder(16, 8)
    dec = MaskDecoder(8, grid, out, hr_dim=6 if hr else None, pixel_dim=3 if pix else None,
                      n_heads=2, hyper_dim=4)
    return prompt, dec


def _inputs(gen, grid=(4, 4), out=(32, 32)):
    gh, gw = grid
    return dict(f_en=torch.randn(gh * gw, 8, generator=gen), v_cls=torch.randn(1, 16, generator=gen),
                dense=torch.randn(gh, gw, generator=gen),
                high_res=torch.randn(out[0] // 4, out[1] // 4, 6, generator=gen),
                image=torch.randn(*out, 3, generator=gen))


def test_learned_token_starts_at_zero():
    assert torch.count_nonzero(PromptEncoder(16, 8).learned) == 0


def test_sparse_prompt_shape(gen):
    prompts = encode_prompts(torch.randn(1, 16, generator=gen), None, PromptEncoder(16, 8))
    assert prompts.sparse.shape == (2, 8) and prompts.dense is None


def test_zero_dense_prompt_gives_bias(gen):
    enc = PromptEncoder(16, 8)
    with torch.no_grad():
        enc.dense_proj.bias.copy_(torch.randn(8, generator=gen))
    bundle = enc(torch.randn(1, 16, generator=gen), torch.zeros(4, 4))
    assert torch.equal(bundle.dense, enc.dense_proj.bias.expand(4, 4, 8))


def test_zero_dense_embedding_equals_no_dense(gen):
    prompt, dec = _head()
    x = _inputs(gen)
    sparse = prompt(x["v_cls"]).sparse
    a = dec(x["f_en"], PromptBundle(sparse, torch.zeros(4, 4, 8)), x["high_res"], x["image"])
    b = dec(x["f_en"], PromptBundle(sparse, None), x["high_res"], x["image"])
    assert torch.equal(a, b)


def test_output_resolution(gen):
    prompt, dec = _head(grid=(8, 8), out=(128, 128))
    x = _inputs(gen, (8, 8), (128, 128))
    out = decode_mask(x["f_en"], prompt(x["v_cls"], x["dense"]), dec, x["high_res"], x["image"])
    assert out.shape == (128, 128)


@pytest.mark.parametrize("hr,pix", [(True, True), (False, False), (True, False)])
def test_matches_oracle(gen, hr, pix):
    prompt, dec = _head(hr, pix)
    x = _inputs(gen)
    out = dec(x["f_en"], prompt(x["v_cls"], x["dense"]), x["high_res"] if hr else None,
              x["image"] if pix else None)
    ref = oracles.decode(oracles.params(prompt), oracles.params(dec), x["f_en"].numpy(),
                         x["v_cls"].numpy(), x["dense"].numpy(),
                         x["high_res"].numpy() if hr else None, x["image"].numpy() if pix else None,
                         (4, 4), (32, 32), 2)
    assert np.abs(out.detach().numpy() - ref).max() <= 1e-10


def test_dense_embedding_is_affine_in_dense(gen):
    enc = PromptEncoder(16, 8)
    v_cls = torch.randn(1, 16, generator=gen)
    d1, d2 = torch.randn(4, 4, generator=gen), torch.randn(4, 4, generator=gen)
    e = lambda d: enc(v_cls, d).dense
    assert torch.allclose(e(d1 + d2) - e(d2), e(d1) - e(torch.zeros(4, 4)), atol=1e-14)


def test_rejects_bad_inputs(gen):
    prompt, dec = _head()
    x = _inputs(gen)
    with pytest.raises(ValueError, match="class token"):
        prompt(torch.randn(2, 16))
    with pytest.raises(ValueError, match="decoder grid"):
        dec(torch.randn(9, 8), prompt(x["v_cls"]))
    with pytest.raises(ValueError, match="dense prompt"):
        dec(x["f_en"], prompt(x["v_cls"], torch.zeros(3, 3)))
    with pytest.raises(ValueError, match="stride-4"):
        dec(x["f_en"], prompt(x["v_cls"]), torch.randn(4, 4, 6))
