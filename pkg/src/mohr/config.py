"""Flat ``key = value`` run configuration.

Precedence is command-line flags, then the config file, then the defaults
below. Unknown keys are rejected so a typo never silently falls back to a
default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import FILTER_MODES
from .model import Hyperparams
from .training import VARIANTS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # Hyperparams
    alpha: float = 1.0
    beta: float = 0.1
    lam: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 512
    iterations: int = 20000
    eval_negatives: int = 100
    seed: int = 0
    dim: int = 10
    # paths
    interactions: str = ""
    relations: str = ""
    out: str = "."
    # mode flags
    bias_in_mixture: bool = True
    rel_loss_on_scores: bool = False
    filter_mode: str = "iterative"
    auc_mode: str = "sampled"
    position_sampling: str = "user"
    negative_exclusion: str = "train"
    variant: str = "full"
    # schedule
    eval_every: int = 1000
    patience: int = 20
    threads: int = 1

    def validate(self, need_data: bool = True) -> "RunConfig":
        if need_data:
            if not self.interactions:
                raise ConfigError("interactions: path is required")
            if not Path(self.interactions).is_file():
                raise ConfigError(f"interactions: no such file {self.interactions!r}")
            if self.relations and not Path(self.relations).is_file():
                raise ConfigError(f"relations: no such file {self.relations!r}")
        choices = {"filter_mode": FILTER_MODES, "auc_mode": ("sampled", "full"),
                   "position_sampling": ("user", "action"), "negative_exclusion": ("train", "full"),
                   "variant": tuple(VARIANTS)}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}: {getattr(self, key)!r} not one of {', '.join(allowed)}")
        if self.threads <= 0:
            raise ConfigError("threads: must be positive")
        try:
            self.hyperparams()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def hyperparams(self) -> Hyperparams:
        names = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: getattr(self, k) for k in names})

    def train_config(self, **extra) -> TrainConfig:
        return TrainConfig(rel_loss_on_scores=self.rel_loss_on_scores,
                           position_sampling=self.position_sampling,
                           negative_exclusion=self.negative_exclusion,
                           eval_every=self.eval_every, patience=self.patience,
                           bias_in_mixture=self.bias_in_mixture, dim=self.dim, **extra)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_show(getattr(self, f.name))}\n" for f in fields(self))


def _show(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind if isinstance(kind, str) else kind.__name__}, "
                          f"got {raw!r}") from None
    return raw


def _types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = _types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def build(file: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then ``file``, then non-None ``overrides``."""
    values = {}
    if file:
        try:
            text = Path(file).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"config: cannot read {file!r}: {exc.strerror}") from None
        values.update(parse_text(text, file))
    types = _types()
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, v, types[key]) if isinstance(v, str) else v
    return dataclasses.replace(RunConfig(), **values)
