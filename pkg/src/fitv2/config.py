"""Flat ``section.key = value`` run configuration with a fixed schema."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: type
    default: Any
    check: Callable[[Any], bool] | None = None
    choices: tuple | None = None


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 <= x < 1


SCHEMA: dict[str, Field] = {
    "seed": Field(int, 0),
    # model
    "model.layers": Field(int, 4, _pos),
    "model.hidden": Field(int, 96, _pos),
    "model.heads": Field(int, 4, _pos),
    "model.patch": Field(int, 2, _pos),
    "model.channels": Field(int, 4, _pos),
    "model.max_tokens": Field(int, 64, _pos),
    "model.num_classes": Field(int, 4, _pos),
    "model.lora_rank": Field(int, 0, _nonneg),  # 0 means hidden/4
    # rope
    "rope.base": Field(float, 10000.0, lambda x: x > 1),
    # extrapolation method used when sampling
    "rope.method": Field(str, "none", choices=("none", "pi", "ntk", "yarn", "vision_ntk", "vision_yarn")),
    "rope.yarn_alpha": Field(float, 1.0, _nonneg),
    "rope.yarn_beta": Field(float, 32.0, _pos),
    # flow
    "flow.sampler": Field(str, "logit_normal", choices=("uniform", "logit_normal")),
    "flow.mean": Field(float, 0.0),
    "flow.std": Field(float, 1.0, _pos),
    "flow.ode": Field(str, "rk4", choices=("euler", "rk4", "adaptive")),
    "flow.steps": Field(int, 32, _pos),
    "flow.rtol": Field(float, 1e-5, _pos),
    "flow.atol": Field(float, 1e-5, _pos),
    "flow.cfg": Field(float, 1.0, lambda x: x >= 1),
    # train
    "train.steps": Field(int, 2000, _nonneg),
    "train.batch": Field(int, 16, _pos),
    "train.lr": Field(float, 1e-3, _nonneg),
    "train.warmup": Field(int, 40, _nonneg),
    "train.ema": Field(float, 0.999, _unit),
    "train.weight_decay": Field(float, 0.0, _nonneg),
    "train.class_drop": Field(float, 0.1, _unit),
    "train.checkpoint_every": Field(int, 500, _nonneg),
    # data
    "data.path": Field(str, ""),
    "data.num_samples": Field(int, 2048, _pos),
    "data.seed": Field(int, 0),
    "data.resolutions": Field(str, "16x16:0.4,10x20:0.2,20x10:0.2,8x24:0.1,24x8:0.1"),
    "data.preprocess": Field(str, "flexible", choices=("flexible", "mixed")),
    "extrapolation.attn_scale": Field(bool, False),
    # high-resolution post-training
    "adapt.max_tokens": Field(int, 100, _pos),
    "adapt.steps": Field(int, 200, _nonneg),
    "adapt.resolutions": Field(str, "20x20:0.5,14x28:0.25,28x14:0.25"),
    # evaluation
    "eval.resolutions": Field(str, "16x16,10x20,12x18"),
    "eval.per_class": Field(int, 16, _pos),
}

# keys that may differ between a checkpoint and the run resuming from it
RESUMABLE_KEYS = frozenset({"train.steps", "train.checkpoint_every"})


def _coerce(key: str, raw: Any) -> Any:
    f = SCHEMA[key]
    if f.kind is bool:
        if isinstance(raw, bool):
            val = raw
        elif str(raw).lower() in ("1", "true", "yes", "on"):
            val = True
        elif str(raw).lower() in ("0", "false", "no", "off"):
            val = False
        else:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    else:
        try:
            val = f.kind(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected {f.kind.__name__}, got {raw!r}") from None
        if f.kind is int and isinstance(raw, str) and str(val) != raw.strip().lstrip("+"):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if f.choices is not None and val not in f.choices:
        raise ConfigError(f"{key}: {val!r} is not one of {f.choices}")
    if f.check is not None and not f.check(val):
        raise ConfigError(f"{key}: value {val!r} out of range")
    return val


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Validated configuration; every schema key always has a value."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: f.default for k, f in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        pre = name + "."
        return {k[len(pre) :]: v for k, v in self.values.items() if k.startswith(pre)}

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            try:
                cfg.set(key.strip(), val.strip())
            except ConfigError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path: os.PathLike) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text(), str(p))

    def apply_overrides(self, pairs: list[str]) -> None:
        for pair in pairs:
            key, sep, val = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not key=value")
            self.set(key.strip(), val.strip())

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    def diff(self, other: "RunConfig", ignore=frozenset()) -> list[tuple[str, Any, Any]]:
        return [
            (k, self.values[k], other.values[k])
            for k in SCHEMA
            if k not in ignore and self.values[k] != other.values[k]
        ]

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self.values))
