"""Run configuration: YAML file, environment interpolation, CLI overrides.

Secrets never live in the file itself; ``${VAR}`` references are expanded
from the environment at load time. Command-line flags override file
values, and the effective configuration is dumped at startup so every run
records what it actually used.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(Exception):
    """Unusable configuration: unknown key, bad type, missing variable."""


@dataclass
class Config:
    # storage and data locations
    store_path: str = "pipeline.db"
    images_dir: str = "images"
    out_dir: str = "shards"
    reports_dir: str = "reports"

    # map-data backend; "fixture:<path>" switches to canned offline responses
    overpass_url: str = "https://overpass-api.de/api/interpreter"
    overpass_min_interval_s: float = 1.0
    overpass_max_concurrency: int = 2
    overpass_max_retries: int = 4
    overpass_timeout_s: float = 300.0

    # completion backend
    llm_url: str = ""
    llm_model: str = ""
    llm_token_env: str = "COMPLETION_API_TOKEN"
    llm_max_concurrency: int = 4
    llm_max_retries: int = 4
    llm_timeout_s: float = 120.0
    mock_llm: bool = False

    # pipeline behaviour
    seed: int = 0
    workers: int = 1
    batch: Optional[int] = None
    lease_s: float = 300.0
    max_rounds: int = 8
    two_probability: float = 0.88
    samples_per_shard: int = 10_000

    # optional asset overrides (shipped data when empty)
    wiki_path: str = ""
    meta_examples_path: str = ""

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.batch is not None and self.batch < 1:
            raise ConfigError("batch must be >= 1 when set")
        if not 0.0 <= self.two_probability <= 1.0:
            raise ConfigError("two_probability must be within [0, 1]")
        if self.samples_per_shard < 1:
            raise ConfigError("samples_per_shard must be >= 1")
        if self.lease_s <= 0:
            raise ConfigError("lease_s must be positive")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if not self.store_path:
            raise ConfigError("store_path must be set")


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}
_DEFAULTS = Config()


def _coerce(name: str, value):
    """Nudge YAML scalars onto the field's declared type; reject nonsense."""
    default = getattr(_DEFAULTS, name)
    if name == "batch":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{name}: unsupported field type")


def interpolate_env(text: str) -> str:
    """Expand every ``${VAR}`` from the environment; unset VAR is an error."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in os.environ:
            raise ConfigError(f"environment variable {name} is not set")
        return os.environ[name]

    return _ENV_REF.sub(sub, text)


def parse_config(text: str) -> Config:
    try:
        raw = yaml.safe_load(interpolate_env(text))
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    values = {}
    for name, value in raw.items():
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key: {name}")
        values[name] = _coerce(name, value)
    config = Config(**values)
    config.validate()
    return config


def load_config(path: str | Path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text("utf-8"))


def dump_config(config: Config) -> str:
    """Stable YAML rendering; parse_config(dump_config(c)) == c."""
    return yaml.safe_dump(dataclasses.asdict(config), sort_keys=True)
