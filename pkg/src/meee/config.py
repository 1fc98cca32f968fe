"""Experiment configuration: flat TOML files, per-environment defaults, validation."""

from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

VARIANTS = ("meee", "meee_v1", "meee_v2", "mbpo", "sac")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: int | None = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")


@dataclass
class ExperimentConfig:
    env_name: str = "lqr"
    variant: str = "meee"
    seed: int = 0
    n_epochs: int = 30
    steps_per_epoch: int = 200
    max_episode_steps: int = 200
    warmup_steps: int = 200
    model_rollouts_per_step: int = 10
    rollout_horizon: int = 1
    # [start_epoch, end_epoch, min_horizon, max_horizon]; empty keeps the horizon fixed
    rollout_horizon_schedule: list = field(default_factory=list)
    gradient_updates_per_step: int = 10
    ensemble_size: int = 5
    candidates: int = 8
    include_base: bool = True
    # "lambda" in config files
    lam: float = 1.0
    psi: list = field(default_factory=lambda: [1.0])
    weight_temperature: float = 20.0
    gamma: float = 0.99
    alpha: float = 0.2
    auto_entropy: bool = False
    polyak: float = 0.995
    single_critic: bool = False
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    model_lr: float = 1e-3
    hidden_sizes: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    batch_size: int = 64
    model_batch_size: int = 256
    model_train_epochs: int = 5
    model_loss: str = "mse"
    variance_include_reward: bool = True
    env_buffer_capacity: int = 100_000
    # 0 means M * k * steps_per_epoch
    model_buffer_capacity: int = 0
    real_data_fraction: float = 0.0
    eval_episodes: int = 10
    eval_interval: int = 200
    divergence_patience: int = 100
    workers: int = 1
    log_wall_clock: bool = True
    out_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @property
    def model_based(self) -> bool:
        return self.variant != "sac"

    @property
    def explore(self) -> bool:
        return self.variant in ("meee", "meee_v2")

    @property
    def weighted(self) -> bool:
        return self.variant in ("meee", "meee_v1")

    def horizon_at(self, epoch: int) -> int:
        if not self.rollout_horizon_schedule:
            return self.rollout_horizon
        e0, e1, k0, k1 = self.rollout_horizon_schedule
        frac = min(max((epoch - e0) / max(e1 - e0, 1), 0.0), 1.0)
        return int(round(k0 + frac * (k1 - k0)))

    def resolved_model_buffer_capacity(self) -> int:
        if self.model_buffer_capacity > 0:
            return self.model_buffer_capacity
        k = max(self.rollout_horizon, *(self.rollout_horizon_schedule[2:] or [0]))
        return self.model_rollouts_per_step * int(k) * self.steps_per_epoch


ENV_DEFAULTS: dict[str, dict[str, Any]] = {
    "lqr": {},
    "pendulum": {
        "n_epochs": 50,
        "steps_per_epoch": 400,
        "warmup_steps": 400,
        "rollout_horizon": 5,
        "eval_interval": 400,
    },
}


def default_config(env_name: str = "lqr") -> ExperimentConfig:
    if env_name not in ENV_DEFAULTS:
        raise ConfigError("env_name", f"unknown environment {env_name!r}; choose from {sorted(ENV_DEFAULTS)}")
    return dataclasses.replace(ExperimentConfig(env_name=env_name), **ENV_DEFAULTS[env_name])


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _field_name(key: str) -> str:
    return "lam" if key == "lambda" else key


def _expected_type(name: str):
    return type(getattr(ExperimentConfig(), name))


def _coerce(key: str, value: Any) -> Any:
    name = _field_name(key)
    kind = _expected_type(name)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def validate(cfg: ExperimentConfig, lines: dict[str, int] | None = None) -> ExperimentConfig:
    """Raise :class:`ConfigError` naming the first out-of-range field."""
    lines = lines or {}

    def fail(key: str, msg: str):
        raise ConfigError(key, msg, lines.get(key))

    if cfg.env_name not in ENV_DEFAULTS:
        fail("env_name", f"unknown environment {cfg.env_name!r}")
    if cfg.variant not in VARIANTS:
        fail("variant", f"must be one of {VARIANTS}, got {cfg.variant!r}")
    positive = [
        "n_epochs", "steps_per_epoch", "max_episode_steps", "model_rollouts_per_step", "rollout_horizon",
        "batch_size", "model_batch_size", "env_buffer_capacity", "eval_episodes", "eval_interval",
        "divergence_patience", "workers",
    ]
    for key in positive:
        if getattr(cfg, key) < 1:
            fail(key, f"must be >= 1, got {getattr(cfg, key)}")
    nonneg = ["warmup_steps", "gradient_updates_per_step", "candidates", "model_train_epochs", "model_buffer_capacity"]
    for key in nonneg:
        if getattr(cfg, key) < 0:
            fail(key, f"must be >= 0, got {getattr(cfg, key)}")
    if cfg.ensemble_size < 2:
        fail("ensemble_size", f"must be >= 2, got {cfg.ensemble_size}")
    if cfg.lam < 0:
        fail("lambda", f"must be >= 0, got {cfg.lam}")
    if not cfg.psi or any(not isinstance(p, (int, float)) or isinstance(p, bool) or p <= 0 for p in cfg.psi):
        fail("psi", f"must be a nonempty list of positive numbers, got {cfg.psi}")
    if cfg.candidates == 0 and not cfg.include_base:
        fail("candidates", "empty candidate set (candidates = 0 and include_base = false)")
    if not cfg.weight_temperature > 0:
        fail("weight_temperature", f"must be > 0, got {cfg.weight_temperature}")
    if not 0.0 < cfg.gamma < 1.0:
        fail("gamma", f"must lie in (0, 1), got {cfg.gamma}")
    if cfg.alpha < 0:
        fail("alpha", f"must be >= 0, got {cfg.alpha}")
    if not 0.0 <= cfg.polyak <= 1.0:
        fail("polyak", f"must lie in [0, 1], got {cfg.polyak}")
    for key in ("actor_lr", "critic_lr", "model_lr"):
        if not getattr(cfg, key) > 0:
            fail(key, f"must be > 0, got {getattr(cfg, key)}")
    if not cfg.hidden_sizes or any(not isinstance(h, int) or isinstance(h, bool) or h < 1 for h in cfg.hidden_sizes):
        fail("hidden_sizes", f"must be a nonempty list of positive integers, got {cfg.hidden_sizes}")
    if cfg.activation not in ("relu", "tanh"):
        fail("activation", f"must be relu or tanh, got {cfg.activation!r}")
    if cfg.model_loss not in ("mse", "nll"):
        fail("model_loss", f"must be mse or nll, got {cfg.model_loss!r}")
    if not 0.0 <= cfg.real_data_fraction <= 1.0:
        fail("real_data_fraction", f"must lie in [0, 1], got {cfg.real_data_fraction}")
    sched = cfg.rollout_horizon_schedule
    if sched and (len(sched) != 4 or any(not isinstance(x, int) or isinstance(x, bool) for x in sched) or sched[2] < 1 or sched[3] < 1):
        fail("rollout_horizon_schedule", f"must be [start_epoch, end_epoch, min_k, max_k] integers with k >= 1, got {sched}")
    return cfg


def config_from_dict(data: dict[str, Any], lines: dict[str, int] | None = None) -> ExperimentConfig:
    """Start from the defaults of ``data['env_name']`` and apply every key; unknown keys are rejected."""
    lines = lines or {}
    for key in data:
        if _field_name(key) not in _FIELDS or key == "lam":
            raise ConfigError(key, "unknown configuration key", lines.get(key))
    env_name = data.get("env_name", "lqr")
    if not isinstance(env_name, str) or env_name not in ENV_DEFAULTS:
        raise ConfigError("env_name", f"unknown environment {env_name!r}", lines.get("env_name"))
    cfg = default_config(env_name)
    updates = {}
    for key, value in data.items():
        try:
            updates[_field_name(key)] = _coerce(key, value)
        except ConfigError as err:
            raise ConfigError(key, str(err).split(": ", 1)[1], lines.get(key)) from None
    return validate(dataclasses.replace(cfg, **updates), lines)


_KEY_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=")


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse a flat TOML file; ``overrides`` replace file keys before defaults are resolved."""
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("<syntax>", f"{path}: {err}") from None
    lines = {}
    for number, line in enumerate(text.splitlines(), start=1):
        m = _KEY_LINE.match(line)
        if m:
            lines.setdefault(m.group(1), number)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(nested[0], "tables are not allowed; the config is flat key = value", lines.get(nested[0]))
    data.update(overrides or {})
    return config_from_dict(data, lines)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(tomli_w.dumps(cfg.to_dict()))
