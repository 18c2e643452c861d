"""Tests for run configuration loading and arena resolution."""

import json

import pytest

from raca.config.manager import VARIANTS, ConfigManager, RunConfig
from raca.utils.errors import ConfigError


def test_defaults_match_packaged_config():
    manager = ConfigManager()
    assert manager.load_run_config() == RunConfig()
    assert set(manager.default_config) == set(RunConfig().to_dict())


def test_variant_components():
    config = RunConfig(variant="qmix_gcn")
    assert (config.pooling, config.relation, config.mixer) == ("mean", "gcn", "qmix")
    assert set(VARIANTS) == {"raca", "qmix_attn", "qmix_gcn", "qmix", "vdn_attn"}


@pytest.mark.parametrize(
    "field, value",
    [
        ("variant", "coma"),
        ("gamma", 1.0),
        ("batch_size", 0),
        ("action_slots", 17),
        ("epsilon_finish", 1.5),
        ("log_level", "LOUD"),
        ("d_k", 2.5),
        ("bootstrap_truncated", "maybe"),
    ],
)
def test_invalid_values_name_their_field(field, value):
    with pytest.raises(ConfigError) as info:
        RunConfig().replace(**{field: value})
    assert info.value.field == field


def test_boolean_options_accept_common_spellings():
    assert RunConfig().bootstrap_truncated is False
    for value in (True, "yes", "On", 1, "true"):
        assert RunConfig().replace(bootstrap_truncated=value).bootstrap_truncated is True
    for value in (False, "no", "off", 0):
        assert RunConfig().replace(bootstrap_truncated=value).bootstrap_truncated is False


def test_buffer_must_hold_a_batch():
    with pytest.raises(ConfigError) as info:
        RunConfig(buffer_size=4, batch_size=8).validate()
    assert info.value.field == "buffer_size"


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"learning_rate": 0.1})
    assert info.value.field == "learning_rate"


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("variant: qmix\nbatch_size: 8\nbuffer_size: 16\nlr: 1.0e-3\n")
    config = ConfigManager().load_run_config(path, {"seed": 3, "variant": None})
    assert config.variant == "qmix"
    assert config.batch_size == 8
    assert config.lr == pytest.approx(1e-3)
    assert config.seed == 3


def test_unreadable_config_is_a_config_error(tmp_path):
    manager = ConfigManager()
    with pytest.raises(ConfigError):
        manager.load_run_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        manager.load_run_config(broken)
    listed = tmp_path / "list.yaml"
    listed.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        manager.load_run_config(listed)


def test_save_config_round_trips(tmp_path):
    manager = ConfigManager()
    config = RunConfig(seed=9, variant="vdn_attn")
    manager.save_config(config.to_dict(), tmp_path / "nested" / "config.json")
    assert manager.load_run_config(tmp_path / "nested" / "config.json") == config


def test_resolve_arena_preset_and_relative_file(tmp_path):
    manager = ConfigManager()
    preset = manager.resolve_arena("3v3_rangers")
    (tmp_path / "custom.json").write_text(json.dumps({**preset.to_dict(), "name": "custom"}))
    resolved = manager.resolve_arena("custom.json", base_dir=tmp_path)
    assert resolved.name == "custom"
    assert resolved.allies == preset.allies
    with pytest.raises(ConfigError) as info:
        manager.resolve_arena("no_such_arena")
    assert info.value.field == "arena"
