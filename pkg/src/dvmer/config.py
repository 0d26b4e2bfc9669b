"""Flat key-value run configuration files.

Format: one `key = value` pair per line; blank lines and lines starting
with '#' are ignored. Booleans accept true/false/1/0/yes/no. Unknown keys
are rejected so typos fail loudly. The training CLI requires `epochs` and
`batch_size` to be stated explicitly; every other key falls back to its
documented default.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields

from .errors import ConfigError
from .features import FeatureConfig
from .model import ModelConfig
from .training import TrainConfig

TRAIN_REQUIRED_KEYS = ("epochs", "batch_size")

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_kv_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            raw = raw.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = raw
    return values


def _convert(key: str, raw: str, target_type):
    if target_type is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}") from exc
    if target_type is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected a number, got {raw!r}") from exc
    return raw


def _field_types(cls) -> dict:
    out = {}
    for f in fields(cls):
        ann = str(f.type)
        if ann.startswith("bool"):
            out[f.name] = bool
        elif ann.startswith("int"):
            out[f.name] = int
        elif ann.startswith("float"):
            out[f.name] = float
        else:
            out[f.name] = str
    return out


def _build(cls, values: dict, consumed: set):
    types = _field_types(cls)
    kwargs = {}
    for key, raw in values.items():
        if key in types:
            if raw.lower() == "none":
                kwargs[key] = None
            else:
                kwargs[key] = _convert(key, raw, types[key])
            consumed.add(key)
    return cls(**kwargs)


def load_train_configs(path, overrides: dict | None = None) -> tuple[TrainConfig, ModelConfig]:
    """Parse a run config file into the trainer and model configs.

    overrides (already-typed values, e.g. from CLI flags) replace file
    values. Missing required keys and unknown keys raise ConfigError.
    """
    values = parse_kv_file(path)
    for key in TRAIN_REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required config key: {key}")

    consumed: set[str] = set()
    train_cfg = _build(TrainConfig, values, consumed)
    model_cfg = _build(ModelConfig, values, consumed)
    unknown = set(values) - consumed
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    if overrides:
        train_fields = {f.name for f in fields(TrainConfig)}
        model_fields = {f.name for f in fields(ModelConfig)}
        train_over = {k: v for k, v in overrides.items() if k in train_fields}
        model_over = {k: v for k, v in overrides.items() if k in model_fields}
        bad = set(overrides) - train_fields - model_fields
        if bad:
            raise ConfigError(f"unknown override(s): {', '.join(sorted(bad))}")
        if train_over:
            train_cfg = TrainConfig(**{**_as_dict(train_cfg), **train_over})
        if model_over:
            model_cfg = ModelConfig(**{**_as_dict(model_cfg), **model_over})

    if model_cfg.cross_attention != train_cfg.use_dsaf:
        model_cfg = ModelConfig(**{**_as_dict(model_cfg), "cross_attention": train_cfg.use_dsaf})
    return train_cfg, model_cfg


def load_feature_config(path=None, overrides: dict | None = None) -> FeatureConfig:
    values = parse_kv_file(path) if path else {}
    consumed: set[str] = set()
    cfg = _build(FeatureConfig, values, consumed)
    unknown = set(values) - consumed
    if unknown:
        raise ConfigError(f"unknown feature config key(s): {', '.join(sorted(unknown))}")
    if overrides:
        cfg = FeatureConfig(**{**_as_dict(cfg), **overrides})
    return cfg


def _as_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


# inference-time choices that do not alter what was trained
_HASH_EXEMPT = {"ensemble_eval"}


def run_config_hash(train_cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    """Stable digest of the resolved run configuration; stamped into
    checkpoints and verified at evaluation time."""
    items = []
    for prefix, cfg in (("train", train_cfg), ("model", model_cfg)):
        for name, value in sorted(_as_dict(cfg).items()):
            if name in _HASH_EXEMPT:
                continue
            items.append(f"{prefix}.{name}={value!r}")
    return hashlib.sha256("\n".join(items).encode("utf-8")).hexdigest()[:16]
