import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from rrsis.losses import (DICE_EPS, LossWeights, SentenceWeight, ce_loss, dice_loss, gradient_map,
                          sentence_embedding, tbl_loss, total_loss)

masks = arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 1))


def _mask(gen, h=6, w=7):
    return (torch.rand(h, w, generator=gen) > 0.5).double()


def test_ce_confident_correct_is_near_zero(gen):
    gt = _mask(gen)
    assert ce_loss(40 * (2 * gt - 1), gt).item() < 1e-15


@given(masks)
def test_ce_zero_logits_is_ln2(gt):
    gt = torch.as_tensor(gt)
    assert abs(ce_loss(torch.zeros(gt.shape), gt).item() - math.log(2)) <= 1e-12


def test_ce_matches_scalar_oracle(gen):
    logits, gt = 3 * torch.randn(4, 4, generator=gen), _mask(gen, 4, 4)
    ref = np.mean([oracles.bce_scalar(z, y) for z, y in zip(logits.ravel().tolist(), gt.ravel().tolist())])
    assert abs(ce_loss(logits, gt).item() - ref) <= 1e-12


def test_ce_is_stable_for_huge_logits():
    gt = torch.tensor([[1.0, 0.0]])
    out = ce_loss(torch.tensor([[-800.0, 800.0]]), gt)
    assert out.item() == pytest.approx(800.0)


def test_ce_rejects_non_binary_and_mismatch():
    with pytest.raises(ValueError, match="0 and 1"):
        ce_loss(torch.zeros(2, 2), torch.full((2, 2), 0.5))
    with pytest.raises(ValueError, match="differ"):
        ce_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_dice_identity_and_disjoint(gen):
    gt = _mask(gen)
    assert dice_loss(gt, gt).item() <= 2 * DICE_EPS
    a = torch.zeros(4, 4)
    b = torch.zeros(4, 4)
    a[:2], b[2:] = 1, 1
    assert dice_loss(a, b).item() == pytest.approx(1.0, abs=1e-6)


def test_dice_half_coverage_closed_form():
    gt = torch.zeros(8, 8)
    gt[:4] = 1  # A = 32
    probs = torch.zeros(8, 8)
    probs[:2] = 1
    a = 32
    assert abs(dice_loss(probs, gt).item() - (1 - (a + DICE_EPS) / (1.5 * a + DICE_EPS))) <= 1e-15


def test_gradient_map_examples():
    assert torch.count_nonzero(gradient_map(torch.full((3, 4), 0.7))) == 0
    assert gradient_map(torch.ones(1, 1)).tolist() == [[0.0]]
    assert gradient_map(torch.tensor([[1.0, 0.0], [0.0, 0.0]])).tolist() == [[2.0, 0.0], [0.0, 0.0]]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.floats(0, 1)))
def test_gradient_map_matches_oracle(m):
    out = gradient_map(torch.as_tensor(m)).numpy()
    assert np.abs(out - oracles.grad_map(m)).max() <= 1e-15
    assert (out >= 0).all()


def test_tbl_examples(gen):
    m = torch.rand(5, 5, generator=gen)
    assert tbl_loss(m, m, 3.7).item() == 0.0
    assert tbl_loss(torch.zeros(5, 5), torch.ones(5, 5), 3.7).item() == 0.0
    pred = torch.tensor([[1.0, 1.0], [1.0, 1.0]])
    gt = torch.tensor([[1.0, 1.0], [1.0, 0.0]])
    # gradient difference is -[[0,1],[1,0]]: two pixels of 1 -> (2*1)^2 * 2 / 4
    assert tbl_loss(pred, gt, 2.0).item() == pytest.approx(2.0, abs=1e-15)


def test_tbl_single_pixel_difference():
    # a difference map of [[1,0],[0,0]] with w=2 gives (2*1)^2/4
    pred = torch.tensor([[0.5, 0.0], [0.0, 0.0]])
    gt = torch.tensor([[0.0, 0.0], [0.0, 0.0]])
    diff = gradient_map(pred) - gradient_map(gt)
    assert diff.tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert tbl_loss(pred, gt, 2.0).item() == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(masks, st.floats(-3, 3), st.integers(0, 999))
def test_tbl_symmetric_and_non_negative(gt, w, seed):
    gt = torch.as_tensor(gt, dtype=torch.float64)
    pred = torch.rand(gt.shape, generator=torch.Generator().manual_seed(seed))
    a, b = tbl_loss(pred, gt, w), tbl_loss(gt, pred, w)
    assert a.item() >= 0 and abs(a.item() - b.item()) <= 1e-15


@settings(max_examples=40, deadline=None)
@given(masks, st.integers(0, 999))
def test_losses_non_negative(gt, seed):
    gt = torch.as_tensor(gt, dtype=torch.float64)
    logits = 4 * torch.randn(gt.shape, generator=torch.Generator().manual_seed(seed))
    total, terms = total_loss(logits, gt, 1.3)
    assert all(v.item() >= 0 for v in terms.values()) and total.item() >= 0


def test_total_is_weighted_sum(gen):
    logits, gt = 2 * torch.randn(8, 8, generator=gen), _mask(gen, 8, 8)
    total, terms = total_loss(logits, gt, 0.8)
    probs = torch.sigmoid(logits)
    manual = ce_loss(logits, gt) + 0.1 * dice_loss(probs, gt) + 0.2 * tbl_loss(probs, gt, 0.8)
    assert abs(total.item() - manual.item()) <= 1e-12
    assert set(terms) == {"ce", "dice", "tbl"}
    ce_only, _ = total_loss(logits, gt, 0.8, LossWeights(1, 0, 0))
    assert ce_only.item() == ce_loss(logits, gt).item()


def test_weight_defaults_and_validation():
    assert (LossWeights().ce, LossWeights().dice, LossWeights().tbl) == (1.0, 0.1, 0.2)
    with pytest.raises(ValueError):
        LossWeights(dice=-1)


def test_sentence_embedding_pools_word_tokens(gen):
    t = torch.randn(6, 4, generator=gen)
    assert torch.equal(sentence_embedding(t), t[1:5].mean(0, keepdim=True))
    with pytest.raises(ValueError):
        sentence_embedding(t[:2])
    sw = SentenceWeight(4)
    assert sw(t).shape == ()
    t2 = t.clone()
    t2[0], t2[-1] = 100, -100
    assert sw(t2).item() == sw(t).item()
