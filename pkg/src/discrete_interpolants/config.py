"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .datasets import DatasetSpec
from .loss import TrainConfig
from .sampler import SamplerConfig
from .schedule import Schedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    # dataset
    dataset_kind: str = "markov"
    dataset: str = ""
    length: int = 4
    data_size: int = 3
    markov_initial: list | None = None
    markov_transition: list | None = None
    height: int = 4
    width: int = 4
    rect_min: int = 1
    rect_max: int = 2
    n_colors: int = 2
    n_classes: int = 1
    support_cap: int = 4096
    allow_truncate: bool = False
    # predictor
    variant: str = "itm"
    d: int = 64
    hidden: int = 128
    # training
    schedule: str = "linear"
    weight_mode: str = "unit"
    epsilon: float = 1e-3
    cond_dropout_p: float = 0.1
    learning_rate: float = 0.03
    momentum: float = 0.9
    batch_size: int = 128
    steps: int = 1000
    masking_ce: bool = True
    grad_clip_norm: float = 2.0
    smoothing_s: float = 0.0
    coupling_ratio: float = 0.0
    # sampling
    kind: str = "itm"
    nfe: int = 1000
    sample_schedule: str = ""
    temperature: float = 1.0
    top_p: float = 1.0
    cfg_omega: float = 0.0
    cfg_mode: str = "log"
    gumbel_mode: str = "none"
    gumbel_temp: float = 0.0
    confidence: str = "logprob"
    argmax_finalize: bool = True
    n_samples: int = 1000
    cond: int = -1
    given: str = ""
    dump_chains: int = 8
    # sweep axes
    sweep_nfe: list = field(default_factory=list)
    sweep_temperature: list = field(default_factory=list)
    sweep_cfg_omega: list = field(default_factory=list)
    sweep_gumbel_mode: list = field(default_factory=list)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            kind=self.dataset_kind, length=self.length, data_size=self.data_size,
            initial=self.markov_initial, transition=self.markov_transition,
            height=self.height, width=self.width, rect_min=self.rect_min, rect_max=self.rect_max,
            n_colors=self.n_colors, n_classes=self.n_classes, cap=self.support_cap,
            allow_truncate=self.allow_truncate,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            weight_mode=self.weight_mode, epsilon=self.epsilon, cond_dropout_p=self.cond_dropout_p,
            learning_rate=self.learning_rate, momentum=self.momentum, batch_size=self.batch_size,
            steps=self.steps, masking_ce=self.masking_ce, grad_clip_norm=self.grad_clip_norm,
            smoothing_s=self.smoothing_s, coupling_ratio=self.coupling_ratio,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            kind=self.kind, nfe=self.nfe,
            schedule=Schedule.parse(self.sample_schedule or self.schedule),
            temperature=self.temperature, top_p=self.top_p, cfg_omega=self.cfg_omega,
            cfg_mode=self.cfg_mode, gumbel_mode=self.gumbel_mode, gumbel_temp=self.gumbel_temp,
            confidence=self.confidence, argmax_finalize=self.argmax_finalize,
            epsilon=self.epsilon, seed=self.seed,
        )

    def sweep_grid(self) -> dict:
        grid = {
            "nfe": self.sweep_nfe, "temperature": self.sweep_temperature,
            "cfg_omega": self.sweep_cfg_omega, "gumbel_mode": self.sweep_gumbel_mode,
        }
        return {k: list(v) for k, v in grid.items() if v}

    def validate(self) -> "RunConfig":
        """Build every sub-config once so bad values fail with the field named."""
        checks = [
            ("schedule", lambda: Schedule.parse(self.schedule)),
            ("sample_schedule", lambda: self.sample_schedule and Schedule.parse(self.sample_schedule)),
            ("dataset", self.dataset_spec),
            ("training", self.train_config),
            ("sampler", self.sampler_config),
        ]
        for name, check in checks:
            try:
                check()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid {name} settings: {exc}") from exc
        if self.variant not in ("etm", "itm"):
            raise ConfigError(f"variant: expected 'etm' or 'itm', got {self.variant!r}")
        if self.given not in ("", "x", "y"):
            raise ConfigError(f"given: expected 'x' or 'y', got {self.given!r}")
        for name in ("jobs", "d", "hidden", "n_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)!r}")
        return self


_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = RunConfig.__dataclass_fields__[name]
    kind = type(default.default) if default.default is not dataclasses.MISSING else list
    if default.default is None:
        kind = list
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{name}: expected true/false, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{name}: expected an integer, got {value!r}") from exc
    if kind is float:
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: expected a number, got {value!r}") from exc
    if kind is list:
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{name}: expected a list, got {value!r}") from exc
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a config file, then apply ``overrides`` (flags win)."""
    values: dict = {}
    if path is not None:
        try:
            values = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return json.dumps(value)


def dump_config(config: RunConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
