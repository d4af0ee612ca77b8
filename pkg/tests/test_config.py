import pytest

from lmdm import config as C
from lmdm.errors import ConfigError


def test_defaults_roundtrip_through_yaml(tmp_path):
    cfg = C.RunConfig()
    path = tmp_path / "c.yaml"
    path.write_text(C.dump(cfg))
    assert C.load(path, env={}) == cfg


def test_unknown_keys_name_their_path(tmp_path):
    with pytest.raises(ConfigError, match="train.stepz"):
        C.from_dict({"train": {"stepz": 3}})
    with pytest.raises(ConfigError, match="unknown config key: modle"):
        C.from_dict({"modle": {}})
    with pytest.raises(ConfigError):
        C.override(C.RunConfig(), "sampler.nope", 1)


def test_override_and_env_seed(tmp_path):
    cfg = C.override(C.RunConfig(), "sampler.steps", 4)
    assert cfg.sampler.steps == 4
    assert C.load(None, env={"LMDM_SEED": "7"}).seed == 7
    with pytest.raises(ConfigError):
        C.load(None, env={"LMDM_SEED": "x"})


def test_example_config_loads():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"
    cfg = C.load(path, env={})
    assert cfg.model.context_frames % cfg.model.target_frames == 0


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError):
        C.from_dict({"model": {"hidden": 30}})
    with pytest.raises(ConfigError):
        C.from_dict({"train": "fast"})
