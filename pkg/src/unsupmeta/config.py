"""Run configuration with ``desk`` and ``paper`` profiles.

Config files are JSON.  A file names a base profile and overrides any subset
of fields::

    {"profile": "desk",
     "rule": {"lambda_hdims": 32},
     "trainer": {"meta_batch": 4, "meta_steps": 100}}

Update-rule and objective constants may be given under their ``lambda_*``
names or under the short field names used in code.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .meta_objective import MetaObjectiveConfig
from .tasks import TaskDistributionConfig
from .update_rule import UpdateRuleConfig


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


LAMBDA_ALIASES = {
    "lambda_hdims": "hdims",
    "lambda_deltadims": "deltadims",
    "lambda_gradc": "gradc",
    "lambda_topdeltasize": "topdeltasize",
    "lambda_computehsize": "computehsize",
    "lambda_philr": "phi_lr",
    "lambda_ridge": "ridge_penalty",
}


@dataclass(frozen=True)
class ArchSamplerConfig:
    hidden_layers: tuple = (2, 3)
    hidden_sizes: tuple = (16, 64)
    embed_dim: int = 32
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        lo, hi = self.hidden_layers
        if not 0 <= lo <= hi:
            raise ValueError("hidden_layers must be an ordered, non-negative range")
        lo, hi = self.hidden_sizes
        if not 1 <= lo <= hi:
            raise ValueError("hidden_sizes must be an ordered, positive range")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")


@dataclass(frozen=True)
class MetaTrainerConfig:
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_values: tuple = (3e-4, 1e-4, 2e-5)
    lr_boundaries: tuple = (100_000, 150_000)
    lr_scale: float = 1.0
    clip_norm: float = 5.0
    meta_batch: int = 256
    unroll_start: tuple = (2, 4)
    unroll_end: tuple = (8, 15)
    unroll_ramp_steps: int = 50_000
    trunc_std_start: float = 20.0
    trunc_std_end: float = 200.0
    trunc_ramp: tuple = (5_000, 20_000)
    labeled_per_class: int = 10
    meta_steps: int = 200_000
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lr_values", "lr_boundaries", "unroll_start", "unroll_end", "trunc_ramp"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.lr_values) != len(self.lr_boundaries) + 1:
            raise ValueError("lr_values needs one more entry than lr_boundaries")
        if any(v <= 0 for v in self.lr_values) or self.lr_scale <= 0:
            raise ValueError("learning rates must be positive")
        if list(self.lr_boundaries) != sorted(self.lr_boundaries):
            raise ValueError("lr_boundaries must be increasing")
        if list(self.lr_values) != sorted(self.lr_values, reverse=True):
            raise ValueError("lr_values must be non-increasing")
        for name in ("unroll_start", "unroll_end"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered range of positive integers")
        if self.unroll_end[0] < self.unroll_start[0] or self.unroll_end[1] < self.unroll_start[1]:
            raise ValueError("unroll_end must not be below unroll_start")
        if self.trunc_ramp[0] > self.trunc_ramp[1] or self.trunc_std_end < self.trunc_std_start:
            raise ValueError("truncation schedule must be non-decreasing")
        if self.clip_norm <= 0 or self.meta_batch < 1 or self.labeled_per_class < 1:
            raise ValueError("clip_norm, meta_batch and labeled_per_class must be positive")
        if self.unroll_ramp_steps < 1 or self.trunc_std_start <= 0:
            raise ValueError("schedule ramps must be positive")


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    rule: UpdateRuleConfig = field(default_factory=UpdateRuleConfig)
    objective: MetaObjectiveConfig = field(default_factory=MetaObjectiveConfig)
    trainer: MetaTrainerConfig = field(default_factory=MetaTrainerConfig)
    tasks: TaskDistributionConfig = field(default_factory=TaskDistributionConfig)
    arch: ArchSamplerConfig = field(default_factory=ArchSamplerConfig)
    workers: int = 1
    deterministic: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_SECTIONS = {
    "rule": UpdateRuleConfig,
    "objective": MetaObjectiveConfig,
    "trainer": MetaTrainerConfig,
    "tasks": TaskDistributionConfig,
    "arch": ArchSamplerConfig,
}


def paper_profile() -> RunConfig:
    return RunConfig(
        profile="paper",
        rule=UpdateRuleConfig(hdims=64, deltadims=32, gradc=4, topdeltasize=64, computehsize=64,
                              phi_lr=3e-4, batch_size=128),
        objective=MetaObjectiveConfig(ridge_penalty=0.1, eval_repeats=5),
        trainer=MetaTrainerConfig(),
        tasks=TaskDistributionConfig(glyph_grid=14, shift_max_px=5.0, glyph_classes=(10, 13, 14, 17, 20, 30)),
        arch=ArchSamplerConfig(hidden_layers=(2, 5), hidden_sizes=(64, 512), embed_dim=32),
    )


def desk_profile() -> RunConfig:
    return RunConfig(
        profile="desk",
        rule=UpdateRuleConfig(hdims=16, deltadims=8, gradc=4, topdeltasize=16, computehsize=16,
                              phi_lr=0.05, batch_size=8),
        objective=MetaObjectiveConfig(ridge_penalty=0.1, eval_repeats=5),
        trainer=MetaTrainerConfig(
            lr_values=(3e-4, 1e-4, 2e-5),
            lr_boundaries=(1_000, 1_500),
            lr_scale=10.0,
            meta_batch=8,
            unroll_ramp_steps=1_000,
            trunc_std_start=20.0,
            trunc_std_end=200.0,
            trunc_ramp=(250, 1_000),
            meta_steps=2_000,
        ),
        tasks=TaskDistributionConfig(),
        arch=ArchSamplerConfig(),
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def get_profile(name: str) -> RunConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"profile: unknown profile {name!r} (choose from {sorted(PROFILES)})") from None


def _apply_section(base, overrides: dict, path: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: expected an object")
    valid = {f.name for f in fields(base)}
    changes = {}
    for key, value in overrides.items():
        name = LAMBDA_ALIASES.get(key, key)
        if name not in valid:
            raise ConfigError(f"{path}.{key}: unknown field")
        if isinstance(value, list):
            value = tuple(value)
        changes[name] = value
    try:
        return replace(base, **changes)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


def build_config(data: dict, profile: str | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected an object")
    data = dict(data)
    name = profile or data.pop("profile", "desk")
    data.pop("profile", None)
    cfg = get_profile(name)
    changes = {}
    for key, value in data.items():
        if key in _SECTIONS:
            changes[key] = _apply_section(getattr(cfg, key), value, key)
        elif key in ("lambda_ridge",):
            changes["objective"] = _apply_section(changes.get("objective", cfg.objective), {key: value}, "objective")
        elif key in ("workers", "deterministic", "seed"):
            changes[key] = value
        else:
            raise ConfigError(f"{key}: unknown field")
    cfg = replace(cfg, **changes)
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        raise ConfigError("workers: must be a positive integer")
    return cfg


def load_config(path, profile: str | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"<root>: not valid JSON ({err})") from None
    return build_config(data, profile)


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict` (used when reading checkpoints)."""
    d = dict(d)
    kwargs = {k: d[k] for k in ("profile", "workers", "deterministic", "seed") if k in d}
    for key, cls in _SECTIONS.items():
        if key in d:
            kwargs[key] = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()})
    return RunConfig(**kwargs)
