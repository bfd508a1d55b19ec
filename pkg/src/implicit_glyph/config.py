"""Flat key-value run configuration (INI syntax, optional section header)."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every key a config file may set.  ``None`` means "use the command's default"."""

    seed: int | None = None
    deterministic: bool | None = None
    v: int | None = None
    p: int | None = None
    iterations: int | None = None
    lr: float | None = None
    latent_lr: float | None = None
    batch_size: int | None = None
    resolution: int | None = None
    size: int | None = None
    grid_res: int | None = None
    w_min: float | None = None
    lambda_w: float | None = None
    lambda_hard: float | None = None
    lambda_cont: float | None = None
    lambda_style: float | None = None
    lambda_latent: float | None = None
    lambda_cate: float | None = None
    infer_iterations: int | None = None
    infer_lr: float | None = None
    finetune_decoder: bool | None = None
    warm_start_iterations: int | None = None
    dataset: str | None = None
    checkpoint: str | None = None
    output: str | None = None

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) is not None and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")

    def merged(self, overrides: dict[str, Any]) -> RunConfig:
        """Copy with every non-None override applied (flags win over the file)."""
        known = {f.name for f in fields(self)}
        data = asdict(self)
        for k, val in overrides.items():
            if k in known and val is not None:
                data[k] = val
        return RunConfig(**data)

    def get(self, key: str, default):
        val = getattr(self, key)
        return default if val is None else val

    def as_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str, typ) -> Any:
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types() -> dict[str, type]:
    hints = get_type_hints(RunConfig)
    out = {}
    for name, hint in hints.items():
        base = [a for a in getattr(hint, "__args__", (hint,)) if a is not type(None)]
        out[name] = base[0]
    return out


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; a leading ``[section]`` header is optional and ignored."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    body = text if text.lstrip().startswith("[") else "[run]\n" + text
    try:
        parser.read_string(body)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    types = _field_types()
    values: dict[str, Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"config key {key!r} given twice")
            values[key] = _convert(key, raw, types[key])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror or err}") from None
    return parse_config(text)
