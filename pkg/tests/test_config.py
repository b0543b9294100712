import json

import pytest

from agediff.config import RunConfig, from_dict, load_config, override, to_dict, toy_quick_config
from agediff.errors import ConfigError


def test_defaults_roundtrip():
    cfg = RunConfig()
    assert from_dict(RunConfig, to_dict(cfg)) == cfg
    assert cfg.edit.replace_ratio == 0.8
    assert (cfg.specialize.steps, cfg.specialize.batch_size, cfg.specialize.learning_rate) == (150, 2, 5e-6)
    assert cfg.schedule.inference_steps == 50
    assert cfg.dataset.num_samples == 150


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="edit.replace_ration"):
        from_dict(RunConfig, {"edit": {"replace_ration": 0.5}})
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"sed": 1})
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"edit": 3})


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"edit": {"replace_ratio": 1.5}})
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"specialize": {"age_labels": "median"}})


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(toy_quick_config(seed=3)))
    cfg = load_config(p)
    assert cfg.seed == 3 and cfg.toy_train.steps == 20 and cfg.edit_run.targets == (80,)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_override_skips_none():
    cfg = RunConfig()
    assert override(cfg, "edit", replace_ratio=None) is cfg
    out = override(cfg, "edit", replace_ratio=0.5)
    assert out.edit.replace_ratio == 0.5 and cfg.edit.replace_ratio == 0.8
    with pytest.raises(ConfigError):
        override(cfg, "edit", replace_ratio=2.0)
