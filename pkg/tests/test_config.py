"""
Tests for the config module.
"""

import pytest
from pydantic import ValidationError

from chronoscene.config import CONFIG_ENV_VAR, EngineConfig, load_config
from chronoscene.errors import FormatError


def test_defaults_match_operating_point():
    config = EngineConfig()
    assert (config.d_thres, config.theta_thres, config.epsilon, config.n_c) == (1.5, 40.0, 10.0, 2)
    assert (config.x_mask, config.gamma, config.y_sim) == (0.45, 0.08, 0.7)
    assert (config.tau_visual, config.tau_text, config.buffer_n, config.staleness_s) == (0.85, 0.80, 3, 6.0)
    assert (config.fps, config.overlap_min, config.qa_n) == (1.0, 0.3, 3)


def test_unknown_and_out_of_range_keys_rejected():
    with pytest.raises(ValidationError):
        EngineConfig(unknown=1)
    with pytest.raises(ValidationError):
        EngineConfig(gamma=0.0)
    with pytest.raises(ValidationError):
        EngineConfig(esm_window_mode="duration")


def test_with_overrides_validates():
    config = EngineConfig().with_overrides(gamma=0.2)
    assert config.gamma == 0.2
    with pytest.raises(ValidationError):
        config.with_overrides(n_c=0)


def test_load_config_from_file(tmp_path):
    path = tmp_path / "engine.toml"
    path.write_text('gamma = 0.1\nesm_window_mode = "duration"\nesm_window_span_s = 3600\n', encoding="utf-8")
    config = load_config(path)
    assert config.gamma == 0.1
    assert config.esm_window_span_s == 3600


def test_load_config_env_fallback(tmp_path, monkeypatch):
    path = tmp_path / "engine.toml"
    path.write_text("qa_n = 5\n", encoding="utf-8")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(path))
    assert load_config().qa_n == 5
    monkeypatch.delenv(CONFIG_ENV_VAR)
    assert load_config() == EngineConfig()


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("gamma = \n", encoding="utf-8")
    with pytest.raises(FormatError, match="invalid TOML"):
        load_config(bad)
    wrong = tmp_path / "wrong.toml"
    wrong.write_text("tau_visual = 2.0\n", encoding="utf-8")
    with pytest.raises(FormatError, match="invalid configuration"):
        load_config(wrong)
