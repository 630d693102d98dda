import json

import pytest

from octokit.config import ConfigError, RunConfig, digest, env_overrides, load_config


def test_defaults_validate():
    cfg = load_config(environ={})
    assert cfg == RunConfig()
    assert cfg.grpo.G == 8 and cfg.grpo.eps == 0.2 and cfg.grpo.beta == 1e-4
    assert cfg.rl.probe_cm == 25


def test_file_then_env_then_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "grpo": {"lr": 0.5, "G": 4}}))
    cfg = load_config(path, environ={"OCTOKIT_GRPO__LR": "0.25", "OCTOKIT_SEED": "4"},
                      overrides={"seed": 5})
    assert cfg.grpo.lr == 0.25 and cfg.grpo.G == 4 and cfg.seed == 5


def test_env_values_are_typed():
    cfg = load_config(environ={"OCTOKIT_RL__COMMIT_PROBE": "false", "OCTOKIT_EVAL__STRIDE": "null",
                               "OCTOKIT_TBA__CLIENT": "stub", "OCTOKIT_SFT__STEPS": "7"})
    assert cfg.rl.commit_probe is False and cfg.eval.stride is None
    assert cfg.sft.steps == 7 and isinstance(cfg.sft.steps, int)


def test_api_key_variable_is_not_a_setting():
    assert env_overrides({"OCTOKIT_API_KEY": "secret"}) == {}


@pytest.mark.parametrize("environ", [
    {"OCTOKIT_NOPE": "1"},
    {"OCTOKIT_GRPO__NOPE": "1"},
    {"OCTOKIT_A__B__C": "1"},
    {"OCTOKIT_SFT__STEPS": "1.5"},
    {"OCTOKIT_RL__COMMIT_PROBE": "1"},
    {"OCTOKIT_GRPO__G": "1"},
    {"OCTOKIT_GRPO__EPS": "1.5"},
    {"OCTOKIT_TBA__CLIENT": "remote"},
    {"OCTOKIT_EVAL__METRIC": "manhattan"},
    {"OCTOKIT_SFT__LR": "0"},
])
def test_bad_settings_raise_config_error(environ):
    with pytest.raises(ConfigError):
        load_config(environ=environ)


def test_bad_json_names_line(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n "seed": 1,\n oops\n}')
    with pytest.raises(ConfigError, match=":3:"):
        load_config(path, environ={})


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json", environ={})


def test_digest_ignores_key_order():
    assert digest({"a": 1, "b": [1, 2]}) == digest({"b": [1, 2], "a": 1})
    assert digest({"a": 1}) != digest({"a": 2})
