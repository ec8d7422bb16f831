"""Tests for ecrl config module."""

import json

import pytest

from ecrl.config import (
    ConfigManager,
    apply_overrides,
    canonical_json,
    config_from_dict,
    config_hash,
    preset_config,
)
from ecrl.errors import ConfigError
from ecrl.models import ExperimentConfig


class TestPresets:
    """Tests for embedded presets."""

    def test_desk_is_default(self):
        """Test the desk preset equals the model defaults."""
        assert preset_config() == ExperimentConfig()

    def test_full_scale(self):
        """Test the full preset scales networks and batch sizes up."""
        config = preset_config("full")
        assert config.network.width_scale == 1.0
        assert config.trainer.n_envs == 4096
        assert config.ppo.minibatch_size == 2 ** 15

    def test_unknown_preset(self):
        """Test an unknown preset raises ConfigError."""
        with pytest.raises(ConfigError) as exc_info:
            preset_config("huge")
        assert exc_info.value.path == "preset"


class TestOverrides:
    """Tests for dotted overrides."""

    def test_override_value(self):
        """Test a dotted override replaces one value."""
        config = apply_overrides(ExperimentConfig(), {"trainer.mode": "naive", "trainer.seed": 3})
        assert config.trainer.mode == "naive"
        assert config.trainer.seed == 3

    def test_none_skipped(self):
        """Test None values leave the field alone."""
        config = apply_overrides(ExperimentConfig(), {"trainer.seed": None})
        assert config.trainer.seed == ExperimentConfig().trainer.seed

    def test_original_untouched(self):
        """Test overrides return a copy."""
        base = ExperimentConfig()
        apply_overrides(base, {"trainer.n_envs": 2})
        assert base.trainer.n_envs == ExperimentConfig().trainer.n_envs

    def test_unknown_field(self):
        """Test an unknown field names its path."""
        with pytest.raises(ConfigError) as exc_info:
            apply_overrides(ExperimentConfig(), {"trainer.speed": 1})
        assert exc_info.value.path == "trainer.speed"
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), {"nothing.here": 1})

    def test_invalid_value(self):
        """Test a value outside its range names the offending field."""
        with pytest.raises(ConfigError) as exc_info:
            apply_overrides(ExperimentConfig(), {"trainer.rho0": 1.5})
        assert exc_info.value.path == "trainer.rho0"

    def test_invalid_mode(self):
        """Test an unknown mode is rejected."""
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), {"trainer.mode": "greedy"})

    @pytest.mark.parametrize("name", ["cube", "cuboid", "L", "apple"])
    def test_object_name_switches_preset(self, name):
        """Test setting the object name loads that object's preset."""
        config = apply_overrides(ExperimentConfig(), {"object.name": name})
        assert config.object.name == name
        assert config.object == ExperimentConfig(object={"name": name}).object


class TestConfigFromDict:
    """Tests for building configs from mappings."""

    def test_partial_mapping(self):
        """Test missing sections come from the preset."""
        config = config_from_dict({"trainer": {"seed": 9}})
        assert config.trainer.seed == 9
        assert config.ppo == ExperimentConfig().ppo

    def test_object_by_name(self):
        """Test an object given by name only uses that object's preset."""
        config = config_from_dict({"object": {"name": "L"}})
        assert config.object == ExperimentConfig(object={"name": "L"}).object

    def test_round_trip(self):
        """Test a dumped config builds the same config."""
        config = apply_overrides(ExperimentConfig(), {"object.name": "apple", "trainer.mode": "oracle"})
        assert config_from_dict(config.model_dump(mode="json")) == config

    def test_invalid_nested_field(self):
        """Test validation errors carry the dotted path."""
        with pytest.raises(ConfigError) as exc_info:
            config_from_dict({"trainer": {"n_envs": 0}})
        assert exc_info.value.path == "trainer.n_envs"


class TestConfigHash:
    """Tests for the configuration hash."""

    def test_stable(self):
        """Test equal configs hash equally."""
        assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())
        assert len(config_hash(ExperimentConfig())) == 12

    def test_sensitive(self):
        """Test any change changes the hash."""
        base = ExperimentConfig()
        changed = apply_overrides(base, {"ppo.clip": 0.25})
        assert config_hash(base) != config_hash(changed)

    def test_canonical_json_sorted(self):
        """Test the canonical dump is compact with sorted keys."""
        text = canonical_json(ExperimentConfig())
        data = json.loads(text)
        assert text == json.dumps(data, sort_keys=True, separators=(",", ":"))


class TestConfigManager:
    """Tests for ConfigManager class."""

    @pytest.fixture
    def config_file(self, tmp_path):
        """Path of a config file in a temp dir."""
        return tmp_path / "config.json"

    def test_defaults_without_file(self, config_file):
        """Test a missing file gives the preset."""
        manager = ConfigManager(config_file)
        assert manager.config == ExperimentConfig()

    def test_load_existing_config(self, config_file):
        """Test loading a partial config file."""
        config_file.write_text(json.dumps({"trainer": {"mode": "naive", "iterations": 5}}))
        manager = ConfigManager(config_file)
        assert manager.config.trainer.mode == "naive"
        assert manager.config.trainer.iterations == 5

    def test_file_layered_on_preset(self, config_file):
        """Test a file is layered on the chosen preset."""
        config_file.write_text(json.dumps({"trainer": {"seed": 4}}))
        manager = ConfigManager(config_file, preset="full")
        assert manager.config.trainer.n_envs == 4096
        assert manager.config.trainer.seed == 4

    def test_invalid_json(self, config_file):
        """Test an unreadable file raises ConfigError."""
        config_file.write_text("{not json")
        with pytest.raises(ConfigError):
            ConfigManager(config_file)

    def test_non_object_json(self, config_file):
        """Test a JSON list is rejected."""
        config_file.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            ConfigManager(config_file)

    def test_save_and_reload(self, config_file):
        """Test saving writes the full config and reload reads it back."""
        manager = ConfigManager(config_file)
        manager.update(trainer__seed=11, object__name="cuboid")
        manager.save_config()

        assert json.loads(config_file.read_text())["trainer"]["seed"] == 11
        manager.config = ExperimentConfig()
        manager.reload()
        assert manager.config.trainer.seed == 11
        assert manager.config.object.name == "cuboid"
        assert not config_file.with_suffix(".lock").exists()

    def test_save_without_file(self):
        """Test saving with no target raises ConfigError."""
        manager = ConfigManager(None)
        manager.config_file = None
        with pytest.raises(ConfigError):
            manager.save_config()

    def test_config_hash_property(self, config_file):
        """Test the manager exposes the hash of its config."""
        manager = ConfigManager(config_file)
        assert manager.config_hash == config_hash(manager.config)
