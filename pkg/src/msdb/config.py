"""Run configuration: flat dotted keys over the library's config dataclasses.

A config file holds one ``section.field = value`` per line; ``#`` starts a
comment. Values are Python literals (``3``, ``0.5``, ``(8, 16, 16, 16)``),
``true``/``false``, or bare strings::

    model.crop_size = 32
    loss.alpha = 6
    train.stage2_loss = mcb-fl
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .datagen import AugmentConfig, SceneSpec, generate_dataset
from .losses import LossConfig
from .model import ModelConfig
from .trainer import Schedule

__all__ = ["ConfigError", "DataConfig", "RunConfig", "load_config", "parse_value"]


class ConfigError(ValueError):
    """Raised for unknown keys, malformed lines, or inconsistent values."""


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    train_count: int = 200
    test_count: int = 50
    parts_per_hand: int = 3
    hands: str = "random"
    part_length: tuple[float, float] = (0.22, 0.3)
    part_aspect: float = 0.55
    clutter: int = 4
    part_contrast: float = 0.12
    noise: float = 0.02
    bg_fraction: tuple[float, float] = (0.6, 0.95)

    def scene(self, seed: int | None = None) -> SceneSpec:
        """Scene spec for ``seed`` sharing this config's palette."""
        kw = {f.name: getattr(self, f.name) for f in fields(SceneSpec)
              if f.name not in ("seed", "palette_seed")}
        return SceneSpec(seed=self.seed if seed is None else seed, palette_seed=self.seed, **kw)

    def test_seed(self) -> int:
        # Disjoint from any training index stream of nearby seeds.
        return self.seed + 1_000_003


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: Schedule = field(default_factory=Schedule)
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    SECTIONS = ("data", "model", "loss", "train", "aug")

    def __post_init__(self):
        expected = 2 * self.data.parts_per_hand + 1
        if self.model.num_parse_classes != expected:
            raise ConfigError(
                f"model.num_parse_classes = {self.model.num_parse_classes} but "
                f"data.parts_per_hand = {self.data.parts_per_hand} needs {expected}")

    # -- flat view ---------------------------------------------------------
    def flat(self) -> dict[str, object]:
        out = {}
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    def dump(self) -> str:
        return "\n".join(f"{k} = {_format(v)}" for k, v in self.flat().items()) + "\n"

    def with_overrides(self, items: Iterable[tuple[str, str]]) -> "RunConfig":
        """Apply ``(dotted_key, raw_value)`` pairs; unknown keys are rejected."""
        changes: dict[str, dict[str, object]] = {s: {} for s in self.SECTIONS}
        known = self.flat()
        for key, raw in items:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            section, name = key.split(".", 1)
            changes[section][name] = _coerce(parse_value(raw), known[key], key)
        kwargs = {}
        for section in self.SECTIONS:
            obj = getattr(self, section)
            try:
                kwargs[section] = replace(obj, **changes[section]) if changes[section] else obj
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}: {exc}") from None
        return RunConfig(**kwargs)

    # -- datasets ----------------------------------------------------------
    def train_set(self):
        return generate_dataset(self.data.scene(), self.data.train_count, self.model.input_size)

    def test_set(self):
        return generate_dataset(self.data.scene(self.data.test_seed()), self.data.test_count,
                                self.model.input_size)


def parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        return str(value)
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if default is None or isinstance(value, type(default)):
        return value
    raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return repr(v)


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path: str | Path | None = None,
                overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    pairs = read_pairs(path) if path else []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return RunConfig().with_overrides(pairs)
