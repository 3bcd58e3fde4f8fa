"""Run configuration: ``section.key = value`` text files with typed overrides.

Bare keys belong to the ``train`` section.  Unknown sections or keys are
rejected, and parse errors name the offending line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from typing import Iterable

from .evaluation import TrialConfig
from .shield import ShieldConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 100
    difficulty: str = "easy"
    episode_seed: int = 12345
    profile: str = "sparse"
    world_seed0: int = 1000
    num_worlds: int = 8
    batch_size: int = 8
    max_steps: int = 500


@dataclass(frozen=True)
class QcDataConfig:
    """How the safety-trial collision predictor is fit when no checkpoint is given."""

    world_seed0: int = 100
    num_worlds: int = 8
    steps_per_world: int = 4000
    label_horizon: int = 20
    uniform_fraction: float = 0.6
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    trial: TrialConfig = field(default_factory=TrialConfig)
    qc: QcDataConfig = field(default_factory=QcDataConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed), trial=replace(self.trial, seed=seed))


SECTIONS = tuple(f.name for f in fields(RunConfig))


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


def apply_overrides(config: RunConfig, items: Iterable[tuple[str, str, str]]) -> RunConfig:
    """Apply ``(where, key, value)`` overrides; ``where`` labels errors (e.g. ``line 3``)."""
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for where, key, value in items:
        section, _, name = key.rpartition(".")
        section = section or "train"
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r} in key {key!r}")
        current = getattr(config, section)
        known = {f.name for f in fields(current)}
        if name not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        updates[section][name] = _coerce(value, getattr(current, name), where)
    out = config
    for section, vals in updates.items():
        if vals:
            try:
                out = replace(out, **{section: replace(getattr(out, section), **vals)})
            except ValueError as exc:
                raise ConfigError(f"invalid {section} settings: {exc}") from None
    return out


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        items.append((f"line {lineno}", key, value))
    return apply_overrides(base or RunConfig(), items)


def parse_assignments(assignments: Iterable[str], base: RunConfig) -> RunConfig:
    items = []
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"--set {a!r}: expected key=value")
        key, value = a.split("=", 1)
        items.append((f"--set {a}", key.strip(), value))
    return apply_overrides(base, items)


def config_to_text(config: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        sub = getattr(config, section)
        for f in fields(sub):
            v = getattr(sub, f.name)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_fields() -> list[str]:
    return [f"{s}.{f.name}" for s in SECTIONS for f in dataclasses.fields(getattr(RunConfig(), s))]
