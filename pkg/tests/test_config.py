import json

import pytest

from conceptfuse.config import ConfigError, RunConfig


def test_defaults_follow_the_published_setup():
    cfg = RunConfig()
    assert cfg.ddim_steps == 50
    assert cfg.alpha == 0.3
    assert cfg.lambda_infonce == 0.2
    assert cfg.epochs == 10
    assert cfg.pno.lr == 1e-2
    assert cfg.pno.lambda_reg == 0.1
    assert cfg.pno.grad_clip == 1.0
    assert 10 <= cfg.pno.steps <= 50
    assert cfg.encoders.d_text == 64 and cfg.encoders.d_image == 48 and cfg.encoders.d_proj == 32


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"alpah": 0.3})
    with pytest.raises(ConfigError, match="pno.stepz"):
        RunConfig.from_dict({"pno": {"stepz": 10}})


@pytest.mark.parametrize("raw", [
    {"alpha": 1.5},
    {"alpha": "high"},
    {"ddim_steps": 0},
    {"epochs": 2.5},
    {"fusion": "sum"},
    {"rescale": 1},
    {"eval_seeds": []},
    {"pno": {"steps": 0}},
    {"pno": {"grad_clip": 0}},
    {"encoders": {"d_text": 32}},
])
def test_invalid_values_rejected(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_partial_override_keeps_defaults():
    cfg = RunConfig.from_dict({"alpha": 0.5, "pno": {"steps": 20}})
    assert cfg.alpha == 0.5 and cfg.pno.steps == 20 and cfg.pno.lr == 1e-2


def test_hash_is_stable_and_sensitive():
    assert RunConfig().hash() == RunConfig().hash()
    assert RunConfig().hash() != RunConfig.from_dict({"alpha": 0.31}).hash()
    assert len(RunConfig().hash()) == 16


def test_dump_load_roundtrip(tmp_path):
    cfg = RunConfig.from_dict({"alpha": 0.4, "eval_seeds": [3, 4]})
    path = tmp_path / "cfg.json"
    path.write_text(cfg.dumps())
    back = RunConfig.load(path)
    assert back == cfg and back.hash() == cfg.hash()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    bad.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_aligner_view():
    cfg = RunConfig()
    a = cfg.align_config("attn")
    assert (a.lambda_infonce, a.epochs, a.batch_size, a.lr, a.loss) == (0.2, 10, 32, 1e-3, "attn")
    with pytest.raises(ConfigError):
        cfg.align_config("mse")
