"""Experiment configuration files."""

import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

# TOML support for configuration
if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError

SEED_ENV = "SA_CRN_SEED"
SECTIONS = ("experiment", "schedule", "run")


def normalize_key(key: str) -> str:
    return key.strip().replace('-', '_')


class ConfigLoader:
    """Loads an experiment config from TOML, YAML or line-oriented key=value text."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def load_config(self) -> Dict[str, Any]:
        """Read the file and return a flat dictionary with underscore keys."""
        if not self.path.exists():
            raise ConfigurationError(f"config file not found: {self.path}")
        suffix = self.path.suffix.lower()
        try:
            if suffix == '.toml':
                with open(self.path, 'rb') as f:
                    config = tomllib.load(f)
            elif suffix in ('.yaml', '.yml'):
                with open(self.path, 'r', encoding='utf-8') as f:
                    config = yaml.safe_load(f) or {}
            else:
                config = self._parse_key_values(self.path.read_text(encoding='utf-8'))
        except (tomllib.TOMLDecodeError, yaml.YAMLError) as e:
            raise ConfigurationError(f"cannot parse {self.path}: {e}") from e
        if not isinstance(config, dict):
            raise ConfigurationError(f"{self.path}: expected a mapping at the top level")
        return self._normalize_config(config)

    def _parse_key_values(self, text: str) -> Dict[str, Any]:
        config = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigurationError(f"{self.path}:{number}: expected key=value, got {raw.strip()!r}")
            key, value = line.split('=', 1)
            if not key.strip():
                raise ConfigurationError(f"{self.path}:{number}: empty key")
            config[key.strip()] = value.strip()
        return config

    def _normalize_config(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """Flatten the experiment/schedule/run sections and normalize key spelling."""
        normalized = {}
        for key, value in config.items():
            if key in SECTIONS and isinstance(value, dict):
                continue
            if isinstance(value, dict):
                raise ConfigurationError(f"{self.path}: unknown section [{key}]")
            normalized[normalize_key(key)] = value
        for section in SECTIONS:
            if isinstance(config.get(section), dict):
                normalized.update({normalize_key(k): v for k, v in config[section].items()})
        return normalized

    @staticmethod
    def default_config() -> Dict[str, Any]:
        """Built-in defaults, with the seed taken from ``SA_CRN_SEED`` when set."""
        return {
            'scheme': 'sym',
            'coupling': 'crn',
            'method': 'inv',
            'a': 6.0,
            'alpha': 1.0,
            'd': 1.0,
            'eta': 0.5,
            'n': 100_000,
            'reps': 400,
            'seed': env_seed(),
            'checkpoints_per_decade': 20,
        }


def env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be a nonnegative integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigurationError(f"{SEED_ENV} must be a nonnegative integer, got {raw!r}")
    return seed


def load_config(path: Optional[Path]) -> Dict[str, Any]:
    """Values from ``path`` layered over the built-in defaults."""
    config = ConfigLoader.default_config()
    if path is not None:
        config.update(ConfigLoader(path).load_config())
    return config
