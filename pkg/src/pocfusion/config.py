"""Run configuration: file + command-line settings for the CLI and the
experiment harness.

A run config is a flat key/value mapping. Keys cover artifact paths, decode
settings, and every model hyperparameter. Precedence is defaults < config
file < command-line overrides, and unknown keys are rejected by name so a
typo never silently falls back to a default.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .model import ModelConfig

DECODE_MODES = ("greedy", "beam")

# Schema entries: key -> expected kind. "path"/"str" take strings, "int" and
# "float" take numbers (bools are rejected), "pair" takes null or a 2-list of
# ints, "pos_int" additionally requires >= 1.
_RUN_SCHEMA = {
    "corpus_path": "path",
    "checkpoint_path": "path",
    "report_path": "path",
    "decode_mode": "str",
    "beam_width": "pos_int",
    "max_out_len": "int",
}

_MODEL_SCHEMA = {
    "layers": "pos_int",
    "heads": "pos_int",
    "d_model": "pos_int",
    "d_ff": "pos_int",
    "vocab_size": "int",
    "max_len": "pos_int",
    "variant": "str",
    "poc_head": "pair",
    "poc_zero_rows": "str",
    "mask_rate": "float",
    "seed": "int",
    "peak_lr": "float",
    "warmup_steps": "int",
    "batch_size": "pos_int",
    "epochs": "int",
}

CONFIG_KEYS = {**_RUN_SCHEMA, **_MODEL_SCHEMA}


def _check_value(key: str, value, kind: str):
    if kind in ("path", "str"):
        if value is not None and not isinstance(value, str):
            raise DataError(f"config key {key!r} expects a string, got {value!r}")
        return value
    if kind == "pair":
        if value is None:
            return None
        ok = (
            isinstance(value, (list, tuple))
            and len(value) == 2
            and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        )
        if not ok:
            raise DataError(
                f"config key {key!r} expects null or a [layer, head] pair of ints, "
                f"got {value!r}"
            )
        return (value[0], value[1])
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataError(f"config key {key!r} expects a number, got {value!r}")
    if kind == "float":
        return float(value)
    if not isinstance(value, int):
        raise DataError(f"config key {key!r} expects an integer, got {value!r}")
    if kind == "pos_int" and value < 1:
        raise DataError(f"config key {key!r} must be >= 1, got {value}")
    return value


def _checked(settings: dict) -> dict:
    out = {}
    for key, value in settings.items():
        if key not in CONFIG_KEYS:
            raise DataError(f"unknown config key {key!r}")
        out[key] = _check_value(key, value, CONFIG_KEYS[key])
    return out


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI command needs: paths, decode settings, model config."""

    corpus_path: str | None = None
    checkpoint_path: str | None = None
    report_path: str | None = None
    decode_mode: str = "greedy"
    beam_width: int = 4
    max_out_len: int = 32
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.decode_mode not in DECODE_MODES:
            raise DataError(
                f"decode_mode must be one of {DECODE_MODES}, got {self.decode_mode!r}"
            )
        if self.beam_width < 1:
            raise DataError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.max_out_len < 0:
            raise DataError(f"max_out_len must be >= 0, got {self.max_out_len}")
        self.model.validate()

    @property
    def seed(self) -> int:
        return self.model.seed

    def to_dict(self) -> dict:
        out = {
            key: getattr(self, key)
            for key in _RUN_SCHEMA
        }
        out.update(self.model.to_dict())
        return out


def _read_config_file(path) -> dict:
    file_path = Path(path)
    if not file_path.exists():
        raise DataError(f"config file not found: {file_path}")
    text = file_path.read_text()
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {file_path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"config file {file_path} must hold a JSON object")
    return data


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the optional config file, and command-line overrides.

    Later sources win key-by-key. Every key is checked against the schema, so
    both file and override typos fail loudly with the offending key named.
    """
    merged: dict = {}
    if path is not None:
        merged.update(_checked(_read_config_file(path)))
    if overrides:
        merged.update(_checked(overrides))

    model_kwargs = {k: v for k, v in merged.items() if k in _MODEL_SCHEMA}
    run_kwargs = {k: v for k, v in merged.items() if k in _RUN_SCHEMA}
    model = ModelConfig(**model_kwargs)
    config = RunConfig(model=model, **run_kwargs)
    return config


def with_model(config: RunConfig, **model_fields) -> RunConfig:
    """Copy of `config` with some model fields replaced."""
    return dataclasses.replace(
        config, model=dataclasses.replace(config.model, **model_fields)
    )
