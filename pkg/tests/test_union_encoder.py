import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rrsis.data import build_vocabulary
from rrsis.gradcheck import GradCase, check_case
from rrsis.union_encoder import (SPECIAL_TOKENS, TokenSequence, UnionConfig, UnionEncoder, Vocabulary,
                                 normalize_text, tokenize)

VOCAB = build_vocabulary()


def test_tokenize_adds_special_tokens():
    seq = tokenize("the gray road", Vocabulary(["the", "gray", "road"]))
    assert seq.ids == (0, 3, 4, 5, 1)
    assert len(seq.ids) == 5


def test_tokenize_unknown_word():
    seq = tokenize("Zzxqy road", VOCAB)
    assert seq.ids == (0, 2, VOCAB.id("road"), 1)


def test_tokenize_normalises_case_and_punctuation():
    assert tokenize("The RED, tank!", VOCAB).ids == tokenize("the red tank", VOCAB).ids
    assert normalize_text("  On-the  left ") == ["on", "the", "left"]


@pytest.mark.parametrize("text", ["", "   ", "?!"])
def test_tokenize_rejects_empty(text):
    with pytest.raises(ValueError):
        tokenize(text, VOCAB)


@given(st.lists(st.sampled_from(VOCAB.tokens[3:]), min_size=1, max_size=12))
def test_token_count_is_words_plus_two(words):
    seq = tokenize(" ".join(words), VOCAB)
    assert len(seq.ids) == len(words) + 2
    assert seq.ids[0] == 0 and seq.ids[-1] == 1
    assert 2 not in seq.ids


def test_token_sequence_validates_markers():
    with pytest.raises(ValueError):
        TokenSequence([3, 4, 1])
    with pytest.raises(ValueError):
        TokenSequence([0, 4])


def test_vocabulary_file_round_trip(tmp_path):
    path = tmp_path / "vocab.txt"
    VOCAB.save(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[:3] == list(SPECIAL_TOKENS)
    assert Vocabulary.load(path) == VOCAB


def _encoder(**kw):
    torch.manual_seed(0)
    return UnionEncoder(UnionConfig(vocab_size=len(VOCAB), **kw))


def test_embedding_shapes():
    enc = _encoder()
    ids = tokenize("the red road on the left", VOCAB).as_tensor()  # six words
    out = enc(torch.rand(64, 64, 3), ids)
    assert out.v.shape == (64, 32)
    assert out.t.shape == (8, 32)
    assert out.v_cls.shape == (1, 32)
    assert out.sequence_length == 73


def test_rejects_wrong_image_size():
    with pytest.raises(ValueError, match="64x64x3"):
        _encoder()(torch.rand(32, 32, 3), tokenize("the road", VOCAB).as_tensor())


def test_rejects_long_text():
    enc = _encoder(max_text_len=3)
    with pytest.raises(ValueError, match="maximum"):
        enc(torch.rand(64, 64, 3), tokenize("the red road on the left", VOCAB).as_tensor())


def test_config_validation():
    with pytest.raises(ValueError):
        UnionConfig(image_size=60, patch_size=8)
    with pytest.raises(ValueError):
        UnionConfig(dim=30, heads=4)
    ref = UnionConfig.reference_scale()
    assert (ref.image_size, ref.dim, ref.n_patches) == (224, 1024, 196)


def test_deterministic():
    image, ids = torch.rand(64, 64, 3), tokenize("the blue tank", VOCAB).as_tensor()
    a, b = _encoder()(image, ids), _encoder()(image, ids)
    assert torch.equal(a.v_cls, b.v_cls) and torch.equal(a.v, b.v) and torch.equal(a.t, b.t)


def test_text_changes_class_token():
    enc = _encoder()
    image = torch.rand(64, 64, 3)
    a = enc(image, tokenize("the blue tank", VOCAB).as_tensor())
    b = enc(image, tokenize("the red tank", VOCAB).as_tensor())
    assert (a.v_cls - b.v_cls).abs().max() > 0


def test_gradients_reach_pixels_and_token_table(gen):
    enc = UnionEncoder(UnionConfig(image_size=16, patch_size=8, dim=16, depth=1, heads=2,
                                   vocab_size=len(VOCAB)))
    image = torch.rand(16, 16, 3, generator=gen)
    ids = tokenize("the white building", VOCAB).as_tensor()
    weights = torch.randn(1 + 4 + 5, 16, generator=gen)

    def fn():
        e = enc(image, ids)
        return (torch.cat([e.v_cls, e.v, e.t]) * weights).sum()

    leaves = {"image": image.requires_grad_(True), **dict(enc.named_parameters())}
    result = check_case(GradCase("union", fn, leaves))
    assert result.max_error <= 1e-4, result.worst()
    fn().backward()
    assert image.grad.abs().sum() > 0
    used = enc.tok_embed.grad[ids].abs().sum(-1)
    assert bool((used > 0).all())
