"""Flat ``key = value`` run configuration files.

One assignment per line, ``#`` starts a comment.  Lists are comma separated.
Keys shared by both methods (``iterations``, ``lr``, ...) may be qualified as
``dip.<key>`` or ``baseline.<key>`` to apply to one method only.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .baseline import BaselineConfig
from .engine import RunConfig
from .generator import GeneratorConfig

METHODS = ("dip", "baseline")


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        values[key] = value
    return values


def read_config(path) -> dict[str, str]:
    return parse_text(Path(path).read_text(encoding="utf-8"))


def _convert(raw: str, template, key: str):
    try:
        if isinstance(template, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, list):
            return [int(v) for v in raw.split(",") if v.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key!r}: {raw!r}") from None


def _fill(obj, values: dict[str, str], prefix: str, aliases: dict[str, str] | None = None):
    aliases = aliases or {}
    updates = {}
    for f in dataclasses.fields(obj):
        if dataclasses.is_dataclass(getattr(obj, f.name)):
            continue
        names = [f.name] + [a for a, target in aliases.items() if target == f.name]
        for name in names:
            for key in (name, f"{prefix}.{name}"):
                if key in values:
                    updates[f.name] = _convert(values[key], getattr(obj, f.name), key)
    return dataclasses.replace(obj, **updates)


def known_keys() -> set[str]:
    keys = {"method", "lambda"}
    for cls, prefix in ((RunConfig, "dip"), (BaselineConfig, "baseline")):
        for f in dataclasses.fields(cls):
            if f.name == "generator":
                continue
            keys.update({f.name, f"{prefix}.{f.name}"})
    keys.add("baseline.lambda")
    keys.update(f.name for f in dataclasses.fields(GeneratorConfig))
    return keys


def check_keys(values: dict[str, str]) -> None:
    unknown = sorted(set(values) - known_keys())
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")


def run_config(values: dict[str, str], seed: int | None = None) -> RunConfig:
    check_keys(values)
    generator = _fill(GeneratorConfig(), values, "generator")
    cfg = _fill(RunConfig(), values, "dip")
    cfg = dataclasses.replace(cfg, generator=generator)
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def baseline_config(values: dict[str, str], seed: int | None = None) -> BaselineConfig:
    check_keys(values)
    cfg = _fill(BaselineConfig(), values, "baseline", aliases={"lambda": "lam"})
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def method_of(values: dict[str, str], default: str = "dip") -> str:
    method = values.get("method", default)
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose one of {', '.join(METHODS)}")
    return method


def dump_generator(cfg: GeneratorConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        text = ",".join(str(v) for v in value) if isinstance(value, list) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def dump_config(cfg) -> str:
    """Serialize a RunConfig or BaselineConfig back to the flat format."""
    lines = []
    prefix = "dip" if isinstance(cfg, RunConfig) else "baseline"
    lines.append(f"method = {prefix}")
    for f in dataclasses.fields(cfg):
        if f.name == "generator":
            continue
        name = "lambda" if f.name == "lam" else f.name
        lines.append(f"{name} = {getattr(cfg, f.name)}")
    text = "\n".join(lines) + "\n"
    if isinstance(cfg, RunConfig):
        text += dump_generator(cfg.generator)
    return text
