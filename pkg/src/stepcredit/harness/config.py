"""Run configuration.

A run is described by one JSON document.  Every section is optional and
falls back to the defaults below; unknown keys anywhere are rejected.  Task
splits are either explicit id lists or ``{"start": a, "stop": b}`` ranges.

    {
      "schema_version": 1,
      "name": "spa",
      "env": {"name": "chaincraft", "params": {"num_subtasks": 5, "num_distractors": 4}},
      "split": {"train": {"start": 0, "stop": 100}, "test": {"start": 5000, "stop": 5050}},
      "strategy": {"kind": "spa", "alpha": 1.0, "beta": 0.5},
      "seeds": [0, 1, 2],
      "output_dir": "runs/spa"
    }
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from ..credit import MODES, STRATEGIES
from ..envsim import ENV_REGISTRY
from ..errors import ConfigError, UsageError
from ..rltrain import PpoConfig

SCHEMA_VERSION = 1
ALGORITHMS = ("ppo", "reinforce", "rloo", "grpo_style")


@dataclass
class EnvSection:
    name: str = "chaincraft"
    params: dict = field(default_factory=dict)


@dataclass
class SplitSection:
    train: Any = field(default_factory=lambda: {"start": 0, "stop": 100})
    test: Any = field(default_factory=lambda: {"start": 5000, "stop": 5050})


@dataclass
class NetSection:
    history_k: int = 8
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"


@dataclass
class BcSection:
    epochs: int = 3
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    batch_size: int = 16
    schedule: str = "cosine"


@dataclass
class ExploreSection:
    M: int = 10
    temperature: float = 0.7


@dataclass
class EstimatorSection:
    mode: str = "direct"
    epochs: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 8
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    zero_output: bool = True


@dataclass
class StrategySection:
    kind: str = "spa"
    alpha: float = 1.0
    beta: float = 0.5
    add_terminal: bool = False
    mc_rollouts: int = 5
    mc_temperature: float = 1.0


@dataclass
class RlSection:
    iterations: int = 40
    episodes_per_iteration: int = 64
    temperature: float = 1.0
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    group_size: int = 8


@dataclass
class EvalSection:
    seeds: list = field(default_factory=lambda: [0, 1])


_SECTIONS = {
    "env": EnvSection,
    "split": SplitSection,
    "net": NetSection,
    "bc": BcSection,
    "explore": ExploreSection,
    "estimator": EstimatorSection,
    "strategy": StrategySection,
    "ppo": PpoConfig,
    "rl": RlSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "run"
    env: EnvSection = field(default_factory=EnvSection)
    split: SplitSection = field(default_factory=SplitSection)
    net: NetSection = field(default_factory=NetSection)
    bc: BcSection = field(default_factory=BcSection)
    explore: ExploreSection = field(default_factory=ExploreSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    algorithm: str = "ppo"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    rl: RlSection = field(default_factory=RlSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs/run"

    def __post_init__(self) -> None:
        self.validate()

    @property
    def train_ids(self) -> list[int]:
        return _ids(self.split.train, "split.train")

    @property
    def test_ids(self) -> list[int]:
        return _ids(self.split.test, "split.test")

    @property
    def uses_estimator(self) -> bool:
        return self.algorithm == "ppo" and self.strategy.kind == "spa"

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.env.name not in ENV_REGISTRY:
            raise ConfigError(f"unknown env {self.env.name!r}; known: {sorted(ENV_REGISTRY)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.strategy.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy.kind!r}; expected one of {STRATEGIES}")
        if self.estimator.mode not in MODES:
            raise ConfigError(f"unknown estimator mode {self.estimator.mode!r}")
        for name, act in (("net", self.net.activation), ("estimator", self.estimator.activation)):
            if act not in ("tanh", "relu"):
                raise ConfigError(f"{name}.activation must be tanh or relu")
        if not self.train_ids or not self.test_ids:
            raise ConfigError("train and test splits must be non-empty")
        if set(self.train_ids) & set(self.test_ids):
            raise ConfigError("train and test splits overlap")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if not self.eval.seeds:
            raise ConfigError("eval.seeds must be non-empty")
        positive = {
            "bc.epochs": self.bc.epochs, "bc.batch_size": self.bc.batch_size, "explore.M": self.explore.M,
            "estimator.epochs": self.estimator.epochs, "estimator.batch_size": self.estimator.batch_size,
            "rl.episodes_per_iteration": self.rl.episodes_per_iteration, "strategy.mc_rollouts": self.strategy.mc_rollouts,
        }
        for key, val in positive.items():
            if int(val) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.rl.iterations < 0:
            raise ConfigError("rl.iterations must be >= 0")
        if self.algorithm in ("rloo", "grpo_style"):
            if self.rl.group_size < 2 or self.rl.episodes_per_iteration % self.rl.group_size:
                raise ConfigError("group algorithms need group_size >= 2 dividing episodes_per_iteration")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **changes) -> RunConfig:
        """Copy with dotted-key overrides, e.g. ``{"strategy.kind": "mean"}``."""
        d = copy.deepcopy(self.to_dict())
        for key, val in changes.items():
            node = d
            *path, last = key.split(".")
            for p in path:
                node = node[p]
            if last not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[last] = val
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, val in d.items():
            if key in _SECTIONS:
                kwargs[key] = _section(_SECTIONS[key], val, key)
            else:
                kwargs[key] = val
        try:
            return cls(**kwargs)
        except (TypeError, ValueError, UsageError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def _section(cls, val, name: str):
    if not isinstance(val, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(val) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**val)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _ids(spec, name: str) -> list[int]:
    if isinstance(spec, dict):
        if set(spec) != {"start", "stop"}:
            raise ConfigError(f"{name} range needs exactly 'start' and 'stop'")
        return list(range(int(spec["start"]), int(spec["stop"])))
    if isinstance(spec, list) and all(isinstance(i, int) for i in spec):
        if len(set(spec)) != len(spec):
            raise ConfigError(f"{name} has duplicate task ids")
        return list(spec)
    raise ConfigError(f"{name} must be a list of task ids or a start/stop range")


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return RunConfig.from_dict(data)
