import pytest
import torch

from rrsis.config import DEFAULTS, ConfigError, RunConfig, apply_mode


def test_defaults_hold_reference_constants():
    cfg = RunConfig()
    assert (cfg["bhfm.alpha_t"], cfg["bhfm.alpha_i"]) == (0.2, 0.5)
    assert (cfg["loss.ce"], cfg["loss.dice"], cfg["loss.tbl"]) == (1.0, 0.1, 0.2)
    assert cfg["optim.lr_fusion"] == 2 * cfg["optim.lr"]
    assert cfg["optim.decay_factor"] == 0.1


def test_text_round_trip():
    cfg = RunConfig().with_overrides(["seed=5", "encoder.widths=8,8,16,16", "bhfm.variant=uni",
                                      "optim.lr=0.003", "verify=true"])
    again = RunConfig.from_text(cfg.to_text())
    assert again == cfg and again.hash() == cfg.hash()
    assert again["encoder.widths"] == (8, 8, 16, 16) and again["verify"] is True


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("# a comment\n\nseed = 3  # trailing\n")
    assert cfg["seed"] == 3


@pytest.mark.parametrize("text", ["sead=1", "optim.learning_rate=0.1"])
def test_unknown_key_is_named(text):
    with pytest.raises(ConfigError, match=text.split("=")[0]):
        RunConfig.from_text(text)
    with pytest.raises(ConfigError, match=text.split("=")[0]):
        RunConfig().with_overrides([text])


@pytest.mark.parametrize("override", ["seed=abc", "verify=maybe", "optim.lr=fast"])
def test_bad_values(override):
    with pytest.raises(ConfigError, match="invalid value"):
        RunConfig().with_overrides([override])


@pytest.mark.parametrize("override", ["bhfm.variant=sideways", "data.canvas=64", "bhfm.alpha_t=2",
                                      "optim.fusion_groups=bhfm,nothing", "union.image_size=48"])
def test_cross_field_validation(override):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides([override])


def test_missing_equals_sign():
    with pytest.raises(ConfigError, match="key=value"):
        RunConfig.from_text("seed 3")


def test_hash_changes_with_values():
    assert RunConfig().hash() != RunConfig().with_overrides(["seed=1"]).hash()
    assert len(DEFAULTS) == len(RunConfig().to_text().splitlines())


def test_verify_mode(monkeypatch):
    monkeypatch.delenv("RS2_VERIFY", raising=False)
    cfg = RunConfig()
    assert not cfg.verify
    assert apply_mode(cfg) is torch.float32
    monkeypatch.setenv("RS2_VERIFY", "1")
    assert cfg.verify
    assert apply_mode(cfg) is torch.float64 and torch.are_deterministic_algorithms_enabled()
    monkeypatch.setenv("RS2_VERIFY", "0")
    assert not cfg.verify
    assert RunConfig({"verify": True}).verify
