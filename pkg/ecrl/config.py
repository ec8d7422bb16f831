"""
Configuration management for ecrl.

Handles loading, validating, overriding and saving experiment configuration.
Precedence: embedded defaults (a preset) < config file < explicit overrides.
"""

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import ValidationError

from ecrl.constants import CONFIG_HASH_LENGTH, ECRL_CONFIG
from ecrl.errors import ConfigError
from ecrl.file_utils import AtomicFileWriter, FileLock
from ecrl.models import PRESETS, ExperimentConfig


def _error_path(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    path = ".".join(str(part) for part in first.get("loc", ()))
    return ConfigError(path, first.get("msg", "invalid value"))


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def preset_config(name: str = "desk") -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset '{name}' (valid: {', '.join(PRESETS)})")
    return PRESETS[name]()


def config_from_dict(data: Mapping[str, Any], preset: str = "desk") -> ExperimentConfig:
    """
    Build a validated config from a (possibly partial) mapping.

    Raises:
        ConfigError: naming the dotted path of the first invalid field
    """
    data = dict(data)
    if "object" in data and isinstance(data["object"], Mapping):
        # A bare object name must pick up that object's preset, not the cube defaults.
        base = _deep_merge(preset_config(preset).model_dump(exclude={"object"}), data)
    else:
        base = _deep_merge(preset_config(preset).model_dump(), data)
    try:
        return ExperimentConfig.model_validate(base)
    except ValidationError as e:
        raise _error_path(e) from e


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """
    Return a copy of config with dotted-path overrides applied.

    Example:
        apply_overrides(cfg, {"trainer.mode": "naive", "trainer.seed": 3})

    Setting "object.name" switches to that object's preset wholesale.
    """
    data = config.model_dump()
    for path, value in overrides.items():
        if value is None:
            continue
        parts = path.split(".")
        if path == "object.name":
            data["object"] = {"name": value}
            continue
        node = data
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(path, "unknown config field")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(path, "unknown config field")
        node[parts[-1]] = copy.deepcopy(value)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise _error_path(e) from e


def canonical_json(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    """First hex characters of sha256 over the canonical JSON dump."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:CONFIG_HASH_LENGTH]


class ConfigManager:
    """
    Manages one experiment configuration file.

    Handles loading configuration from disk (defaults when absent),
    validation, overrides, and persisting changes atomically.
    """

    def __init__(self, config_file: Optional[Path] = None, preset: str = "desk"):
        """
        Initialize configuration manager.

        Args:
            config_file: Path to a JSON config file. Defaults to $ECRL_CONFIG, or none.
            preset: Embedded defaults the file is layered on
        """
        if config_file is None and ECRL_CONFIG:
            config_file = Path(ECRL_CONFIG)
        self.config_file = Path(config_file) if config_file else None
        self.preset = preset
        self.config = self._load_config()

    def _load_config(self) -> ExperimentConfig:
        """Load configuration from file or use the preset."""
        if self.config_file is None or not self.config_file.exists():
            return preset_config(self.preset)

        try:
            data = json.loads(self.config_file.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("", f"{self.config_file} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("", f"{self.config_file} must hold a JSON object")
        return config_from_dict(data, self.preset)

    def save_config(self, path: Optional[Path] = None) -> Path:
        """Save configuration atomically with locking."""
        target = Path(path) if path else self.config_file
        if target is None:
            raise ConfigError("", "no config file to save to")
        lock = FileLock(target.with_suffix(".lock"))
        if not lock.acquire(timeout=5):
            raise RuntimeError("Could not acquire config lock")

        try:
            AtomicFileWriter.write_json(target, self.config.model_dump(mode="json"), indent=2)
        finally:
            lock.release()
        return target

    def reload(self) -> None:
        """Reload configuration from disk."""
        self.config = self._load_config()

    def update(self, **overrides: Any) -> ExperimentConfig:
        """
        Apply dotted overrides given as keyword arguments with "__" for ".".

        Example:
            manager.update(trainer__mode="naive")
        """
        self.config = apply_overrides(
            self.config, {key.replace("__", "."): value for key, value in overrides.items()}
        )
        return self.config

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)
