"""Configuration loading: TOML files plus dotted-key overrides.

A config file mirrors the nested pipeline dataclasses; sections map to
sub-configs and keys to fields, e.g.

    seed = 7
    [propose]
    alpha = 0.2
    tau = 0.08
    [search]
    max_evals = 6000
    [search.loss]
    feature_weight = 0.1

CLI overrides use the same dotted addressing: --set propose.alpha=0.2.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .pipeline import PipelineConfig

__all__ = ["load_config", "apply_overrides", "config_snapshot"]


def _coerce(value, current):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot read {value!r} as a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if current is None:
        # Unset optionals: accept ints then floats then raw strings.
        try:
            return int(value)
        except (TypeError, ValueError):
            try:
                return float(value)
            except (TypeError, ValueError):
                return value
    return type(current)(value)


def _set_dotted(obj, dotted: str, value):
    parts = dotted.split(".")
    target = obj
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise KeyError(f"unknown config section {part!r} in {dotted!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
        raise KeyError(f"unknown config key {dotted!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise KeyError(f"{dotted!r} is a section, not a value")
    coerced = _coerce(value, current)
    if getattr(type(target), "__dataclass_params__").frozen:
        # Rebuild frozen dataclasses (FeatureLoss) in place of mutation.
        replacement = dataclasses.replace(target, **{leaf: coerced})
        _replace_in_parent(obj, parts[:-1], replacement)
    else:
        setattr(target, leaf, coerced)


def _replace_in_parent(root, path: list[str], replacement):
    if not path:
        raise KeyError("cannot replace the root config")
    parent = root
    for part in path[:-1]:
        parent = getattr(parent, part)
    setattr(parent, path[-1], replacement)


def _flatten(table: dict, prefix: str = "") -> list[tuple[str, object]]:
    items = []
    for key, value in table.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, dotted + "."))
        else:
            items.append((dotted, value))
    return items


def apply_overrides(config: PipelineConfig, overrides) -> PipelineConfig:
    """Apply `key=value` strings (dotted keys) to a config in place."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        _set_dotted(config, key.strip(), raw.strip())
    return config


def load_config(path=None, overrides=(), seed: int | None = None) -> PipelineConfig:
    config = PipelineConfig()
    if path is not None:
        data = tomllib.loads(Path(path).read_text())
        for dotted, value in _flatten(data):
            _set_dotted(config, dotted, value)
    apply_overrides(config, overrides or ())
    if seed is not None:
        config.seed = int(seed)
    return config


def config_snapshot(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)
