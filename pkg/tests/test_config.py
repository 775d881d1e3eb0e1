import logging
import os

import pytest
import toml

from rewardloop.config import (
    API_KEY_ENV,
    BASE_URL_ENV,
    FALLBACK_API_KEY_ENV,
    BackendKind,
    CostNormalization,
    LlmConfig,
    PromptMode,
    ReferenceNormalization,
    RunConfig,
    Task,
    dump_config,
    get_similarity_config,
    load_config,
    set_config,
)

REPO_CONFIG = os.path.join(os.path.dirname(__file__), "..", "config.toml")


def test_empty_file_gives_defaults():
    config = RunConfig.parse({})
    assert config == RunConfig()
    assert config.task.name == Task.VELOCITY_TRACKING
    assert config.trainer.population == 32
    assert config.similarity.radius == 2
    assert config.llm.prompt_mode == PromptMode.VIDEO


def test_repository_config_loads():
    config = load_config(REPO_CONFIG)
    assert config.reference.stride == 3
    assert config.reference.normalization == ReferenceNormalization.FRAME
    assert config.llm.backend == BackendKind.HTTP
    assert config.env.target_vel_y_range == (-0.3, 0.3)
    assert config.run.workers == 0


@pytest.mark.parametrize(
    "section, values",
    [
        ("task", {"name": "swim"}),
        ("reference", {"normalization": "polar"}),
        ("reference", {"stride": 0}),
        ("env", {"steps": 1}),
        ("env", {"target_vel_x_range": [2.0, 1.0]}),
        ("trainer", {"elite_fraction": 0.0}),
        ("llm", {"max_retries": -1}),
        ("run", {"seed": -3}),
    ],
)
def test_invalid_values(section, values):
    with pytest.raises(ValueError):
        RunConfig.parse({section: values})


def test_unknown_cost_normalization_falls_back(caplog):
    with caplog.at_level(logging.WARNING):
        config = RunConfig.parse({"similarity": {"cost_normalization": "median"}})
    assert config.similarity.cost_normalization == CostNormalization.SUM
    assert "median" in caplog.text


def _custom():
    return RunConfig.parse(
        {
            "task": {"name": "run_fast", "behavior": "trot"},
            "reference": {"stride": 2, "joint_map": {"left_hip": "hip"}},
            "env": {"noise_sigma": 0.0, "target_vel_x_range": [0.25, 0.75]},
            "trainer": {"sigma_floor": 0.001},
            "llm": {"backend": "mock", "mock_script": "script.jsonl", "temperature": 0.7},
            "run": {"rounds": 2, "seed": 11, "out_dir": "runs/x"},
        }
    )


def test_snapshot_parses_back():
    config = _custom()
    assert RunConfig.parse(config.snapshot()) == config


def test_toml_dump_parses_back():
    config = _custom()
    assert RunConfig.parse(toml.loads(dump_config(config))) == config


def test_hash_ignores_the_output_directory():
    config = _custom()
    moved = config.with_overrides(out_dir="elsewhere")
    assert moved.run.out_dir == "elsewhere"
    assert moved.config_hash() == config.config_hash()
    assert config.with_overrides(seed=12).config_hash() != config.config_hash()


def test_overrides_are_validated():
    config = _custom()
    assert config.with_overrides(rounds=4, samples=3).run.rounds == 4
    assert config.with_overrides(backend="http").llm.backend == BackendKind.HTTP
    with pytest.raises(ValueError):
        config.with_overrides(rounds=0)
    with pytest.raises(ValueError):
        config.with_overrides(backend="carrier-pigeon")


def test_environment_overrides(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    monkeypatch.delenv(FALLBACK_API_KEY_ENV, raising=False)
    monkeypatch.delenv(BASE_URL_ENV, raising=False)
    llm = LlmConfig(base_url="http://config/v1")
    assert llm.resolved_base_url() == "http://config/v1"
    assert LlmConfig.api_key() is None

    monkeypatch.setenv(BASE_URL_ENV, "http://env/v1")
    monkeypatch.setenv(FALLBACK_API_KEY_ENV, "fallback")
    assert llm.resolved_base_url() == "http://env/v1"
    assert LlmConfig.api_key() == "fallback"
    monkeypatch.setenv(API_KEY_ENV, "primary")
    assert LlmConfig.api_key() == "primary"


def test_cached_config():
    config = _custom()
    set_config(config)
    assert get_similarity_config() is config.similarity


def test_invalid_enum_lists_the_choices():
    with pytest.raises(ValueError, match="expected one of: velocity_tracking, run_fast"):
        RunConfig.parse({"task": {"name": "swim"}})
