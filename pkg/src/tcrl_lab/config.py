"""Experiment configuration: strict YAML parsing into nested dataclasses.

Defaults follow the published hyperparameter table, except the desk-scale
batch size (4000); ``paper_scale`` restores 40000.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .attackers import KINDS, AttackConfig
from .cmdp import PointCircle, PointRun, grid_hazard
from .errors import ConfigError
from .perturbation import PerturbationBudget
from .trainer import METHODS, PidGains, PpoConfig, TrainerConfig

PAPER_BATCH = 40000
DESK_BATCH = 4000
VARIANTS = ("grid_hazard", "point_run", "point_circle")


@dataclass
class EnvBlock:
    variant: str = "grid_hazard"
    horizon: int = 200
    geometry: dict = field(default_factory=dict)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"env.variant: {self.variant!r} not in {VARIANTS}")
        if self.horizon < 1:
            raise ConfigError("env.horizon: must be at least 1")


@dataclass
class PolicyBlock:
    hidden: list = field(default_factory=lambda: [256, 256])
    critic_hidden: list = field(default_factory=lambda: [256, 256])
    init_scale: float = 0.0

    def validate(self):
        if any(int(h) < 1 for h in list(self.hidden) + list(self.critic_hidden)):
            raise ConfigError("policy.hidden: layer sizes must be positive")


@dataclass
class PerturbationBlock:
    eps: float = 0.1
    alpha: float = 0.1
    p: str = "inf"
    eps_bar_max: float | None = None

    def validate(self):
        if self.eps < 0:
            raise ConfigError("perturbation.eps: must be nonnegative")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("perturbation.alpha: must lie in (0, 1)")
        if str(self.p) not in ("inf", "2"):
            raise ConfigError("perturbation.p: must be 'inf' or '2'")

    def budget(self) -> PerturbationBudget:
        p = np.inf if str(self.p) == "inf" else 2
        return PerturbationBudget(eps=self.eps, alpha=self.alpha, p=p, eps_bar_max=self.eps_bar_max)


@dataclass
class TrainerBlock:
    method: str = "tcrl"
    epochs: int = 100
    batch_size: int = DESK_BATCH
    minibatch_size: int = 300
    actor_steps: int = 80
    critic_steps: int = 80
    worst_critic_steps: int = 80
    actor_lr: float = 2e-4
    critic_lr: float = 1e-3
    tabular_critic_lr: float = 0.1
    clip: float = 0.02
    gamma: float = 0.99
    gae_lambda: float = 0.95
    target_kl: float = 0.01
    n_envs: int = 40
    normalize_advantages: bool = True
    cost_threshold: float = 5.0
    eps_corr: float = 5.0
    eps_ent: float = 2.0
    kp: float = 0.1
    ki: float = 0.005
    kd: float = 0.002
    window: int = 16
    n_bins: int = 10
    reward_range: list | None = None
    fixed_multipliers: dict | None = None
    use_worst_cost: bool | None = None
    use_reward_defense: bool | None = None
    orientation: str = "max"
    worst_critic_init: float = 0.0
    attack_fraction: float = 0.5

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"trainer.method: {self.method!r} not in {METHODS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"trainer.gamma: discount {self.gamma} must lie in [0, 1)")
        if not 0.0 < self.clip < 1.0:
            raise ConfigError("trainer.clip: must lie in (0, 1)")
        for key in ("actor_lr", "critic_lr", "tabular_critic_lr"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"trainer.{key}: learning rate must be positive")
        for key in ("epochs", "batch_size", "minibatch_size", "n_envs", "window", "n_bins"):
            if getattr(self, key) < 1:
                raise ConfigError(f"trainer.{key}: must be at least 1")
        if self.actor_steps < 0 or self.critic_steps < 0 or self.worst_critic_steps < 0:
            raise ConfigError("trainer.*_steps: must be nonnegative")
        if not 0.0 <= self.attack_fraction <= 1.0:
            raise ConfigError("trainer.attack_fraction: must lie in [0, 1]")
        if self.orientation not in ("max", "min"):
            raise ConfigError("trainer.orientation: must be 'max' or 'min'")
        if self.cost_threshold < 0:
            raise ConfigError("trainer.cost_threshold: must be nonnegative")
        if self.fixed_multipliers is not None:
            bad = set(self.fixed_multipliers) - {"cost", "corr", "ent"}
            if bad:
                raise ConfigError(f"trainer.fixed_multipliers: unknown key(s) {sorted(bad)}")
            if any(v < 0 for v in self.fixed_multipliers.values()):
                raise ConfigError("trainer.fixed_multipliers: values must be nonnegative")

    def ppo(self) -> PpoConfig:
        names = {f.name for f in fields(PpoConfig)}
        return PpoConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def trainer(self, train_attacker=None) -> TrainerConfig:
        return TrainerConfig(
            method=self.method, cost_threshold=self.cost_threshold, eps_corr=self.eps_corr,
            eps_ent=self.eps_ent, use_worst_cost=self.use_worst_cost,
            use_reward_defense=self.use_reward_defense, train_attacker=train_attacker,
            orientation=self.orientation, worst_critic_steps=self.worst_critic_steps,
            window=self.window, n_bins=self.n_bins,
            reward_range=None if self.reward_range is None else tuple(self.reward_range),
            fixed_multipliers=self.fixed_multipliers,
            pid=PidGains(self.kp, self.ki, self.kd), worst_critic_init=self.worst_critic_init,
            attack_fraction=self.attack_fraction,
        )


@dataclass
class AttackBlock:
    train: str | None = None  # None -> method default
    eval: list = field(default_factory=lambda: list(KINDS))
    steps: int = 10
    lr: float = 0.05
    weight: float = 0.5
    cost_critic: str = "worst"
    step_rule: str = "steepest"

    def validate(self):
        if self.train is not None and self.train not in KINDS:
            raise ConfigError(f"attack.train: {self.train!r} not in {KINDS}")
        for k in self.eval:
            if k not in KINDS:
                raise ConfigError(f"attack.eval: {k!r} not in {KINDS}")
        try:
            self.make("worst_tc", PerturbationBudget(eps=0.1))
        except ConfigError as err:
            raise ConfigError(f"attack: {err}") from None

    def make(self, kind: str, budget: PerturbationBudget) -> AttackConfig:
        return AttackConfig(kind=kind, steps=self.steps, lr=self.lr, weight=self.weight,
                            budget=budget, cost_critic=self.cost_critic, step_rule=self.step_rule)


@dataclass
class RunBlock:
    seeds: list = field(default_factory=lambda: [0])
    episodes: int = 50
    out_dir: str = "runs"
    name: str = "run"
    methods: list = field(default_factory=lambda: list(METHODS))
    checkpoint_every: int = 0

    def validate(self):
        if not self.seeds:
            raise ConfigError("run.seeds: must be a nonempty list")
        if self.episodes < 1:
            raise ConfigError("run.episodes: must be at least 1")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"run.methods: {m!r} not in {METHODS}")


@dataclass
class ExperimentConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    policy: PolicyBlock = field(default_factory=PolicyBlock)
    perturbation: PerturbationBlock = field(default_factory=PerturbationBlock)
    trainer: TrainerBlock = field(default_factory=TrainerBlock)
    attack: AttackBlock = field(default_factory=AttackBlock)
    run: RunBlock = field(default_factory=RunBlock)

    def validate(self) -> "ExperimentConfig":
        for f in fields(self):
            getattr(self, f.name).validate()
        try:
            self.make_env()
        except (ValueError, TypeError) as err:
            raise ConfigError(f"env.geometry: {err}") from None
        return self

    def make_env(self):
        g = dict(self.env.geometry)
        common = dict(gamma=self.trainer.gamma, cost_threshold=self.trainer.cost_threshold,
                      horizon=self.env.horizon)
        if self.env.variant == "grid_hazard":
            if "layout" in g:
                g["layout"] = tuple(g["layout"])
            return grid_hazard(**g, **common)
        if self.env.variant == "point_run":
            return PointRun(**g, **common)
        return PointCircle(**g, **common)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"unknown key {where!r}")
        sub = _BLOCKS.get((cls, key))
        kwargs[key] = _build(sub, value, where) if sub is not None else _scalar(value, known[key], where)
    return cls(**kwargs)


def _scalar(value, f, where):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return type(default)(value) if isinstance(default, float) or float(value).is_integer() \
            else value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping")
    if isinstance(default, str) and not isinstance(value, str):
        return str(value)
    return value


_BLOCKS = {
    (ExperimentConfig, "env"): EnvBlock,
    (ExperimentConfig, "policy"): PolicyBlock,
    (ExperimentConfig, "perturbation"): PerturbationBlock,
    (ExperimentConfig, "trainer"): TrainerBlock,
    (ExperimentConfig, "attack"): AttackBlock,
    (ExperimentConfig, "run"): RunBlock,
}


def config_from_dict(data: dict | None, paper_scale: bool = False) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if paper_scale:
        cfg.trainer.batch_size = PAPER_BATCH
    return cfg.validate()


def load_config(path, paper_scale: bool = False) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"config parse error in {path}: {err}") from None
    return config_from_dict(data, paper_scale)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
