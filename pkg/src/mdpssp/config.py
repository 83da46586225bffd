"""Run configuration: one INI file, dotted overrides, a stable hash.

Sections and keys::

    [run]      seed, out
    [sim]      every SimConfig field except ``seed``
    [train]    learning_rate, epochs, l2, max_outer_iters, holdout_fraction
    [planner]  strategy, beam_size, dedup
    [eval]     horizons, strategies, source, score_with, noise_max,
               noise_horizon, stats_list_length, workers

Randomness flows from ``run.seed``.  The simulator derives its streams from
``(stream id, seed + index)``; training-log users take indices
``0..num_users-1`` and evaluation users ``num_users..2*num_users-1``.  Model
initialization uses ``seed``, the hold-out split ``(seed, 1)``, and the noise
sweep draws each (user, level) from ``(seed, user_id, level)``.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .models import TrainParams
from .simulator import SimConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 200
    l2: float = 1e-4
    max_outer_iters: int = 50
    holdout_fraction: float = 0.2


@dataclass(frozen=True)
class PlannerSection:
    strategy: str = "ssp"
    beam_size: int = 5
    dedup: bool = False


@dataclass(frozen=True)
class EvalConfig:
    horizons: tuple[int, ...] = (20, 50)
    strategies: tuple[str, ...] = ("greedy", "beam", "ssp")
    source: str = "trained"
    score_with: str = "same"
    noise_max: int = 10
    noise_horizon: int = 20
    stats_list_length: int = 20
    workers: int = 1


@dataclass(frozen=True)
class RunSection:
    seed: int = 7
    out: str = "runs/default"


_SECTIONS = {
    "run": RunSection,
    "sim": SimConfig,
    "train": TrainConfig,
    "planner": PlannerSection,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: PlannerSection = field(default_factory=PlannerSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.sim.seed != self.run.seed:
            object.__setattr__(self, "sim", replace(self.sim, seed=self.run.seed))
        if self.eval.source not in ("trained", "truth"):
            raise ConfigError(f"eval.source must be 'trained' or 'truth', got {self.eval.source!r}")
        if self.eval.score_with not in ("same", "truth"):
            raise ConfigError(f"eval.score_with must be 'same' or 'truth'")
        if not 0 <= self.eval.noise_max <= 10:
            raise ConfigError("eval.noise_max must be in 0..10")
        if not 0 < self.train.holdout_fraction < 1:
            raise ConfigError("train.holdout_fraction must be in (0, 1)")
        if self.planner.strategy not in ("ssp", "greedy", "beam"):
            raise ConfigError(f"unknown planner.strategy {self.planner.strategy!r}")
        if self.planner.beam_size < 1:
            raise ConfigError("planner.beam_size must be >= 1")

    @property
    def seed(self) -> int:
        return self.run.seed

    def train_params(self) -> TrainParams:
        t = self.train
        return TrainParams(t.learning_rate, t.epochs, t.l2, self.seed, t.max_outer_iters)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            if name == "sim":
                section.pop("seed")
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def hash(self) -> str:
        """Digest of everything except the output directory."""
        doc = self.to_dict()
        doc["run"] = {k: v for k, v in doc["run"].items() if k != "out"}
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for key, value in values.items():
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _coerce(section: str, key: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``section.key`` overrides."""
    values: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            values[section].update(parser[section])
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        values[section][key] = raw

    built = {}
    for name, cls in _SECTIONS.items():
        defaults = {f.name: f.default for f in fields(cls)}
        if name == "sim":
            defaults.pop("seed")
        kwargs = {}
        for key, raw in values[name].items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {name}.{key}")
            kwargs[key] = _coerce(name, key, raw, defaults[key])
        built[name] = cls(**kwargs)
    return RunConfig(**built)
