"""Exploration rollouts of the base policy, grouped by task.

Dataset file (JSON lines, version 1).  The first line is a header::

    {"format": "stepcredit.explore", "version": 1, "env": ..., "env_params": {...},
     "M": ..., "temperature": ..., "base_seed": ..., "policy": <param digest>,
     "history_k": ..., "task_ids": [...], "truncated": [...]}

Every following line is one trajectory record (``Trajectory.to_record``) with
an extra ``"group"`` index.  Records appear in task-major order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .agentcore import Featurizer, run_episodes, start_episode
from .envsim import Environment, Trajectory, grounding_accuracy, make_env
from .errors import UsageError
from .tinynn import MlpNet, net_digest

FORMAT = "stepcredit.explore"
VERSION = 1


@dataclass
class ExploreDataset:
    env_name: str
    env_params: dict[str, Any]
    M: int
    temperature: float
    base_seed: int
    policy_id: str
    groups: list[list[Trajectory]] = field(default_factory=list)
    truncated: list[int] = field(default_factory=list)

    @property
    def trajectories(self) -> list[Trajectory]:
        return [t for g in self.groups for t in g]

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups)

    def header(self) -> dict[str, Any]:
        return {
            "format": FORMAT,
            "version": VERSION,
            "env": self.env_name,
            "env_params": self.env_params,
            "M": self.M,
            "temperature": self.temperature,
            "base_seed": self.base_seed,
            "policy": self.policy_id,
            "task_ids": [g[0].task.task_id for g in self.groups if g],
            "truncated": self.truncated,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for gi, group in enumerate(self.groups):
                for traj in group:
                    rec = traj.to_record()
                    rec["group"] = gi
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> ExploreDataset:
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != FORMAT or header.get("version") != VERSION:
                raise UsageError(f"{path}: not a version-{VERSION} exploration dataset")
            env = make_env(header["env"], **header["env_params"])
            ds = cls(
                header["env"], header["env_params"], header["M"], header["temperature"],
                header["base_seed"], header["policy"], truncated=list(header.get("truncated", [])),
            )
            ds.groups = [[] for _ in header["task_ids"]]
            for line in fh:
                rec = json.loads(line)
                ds.groups[rec["group"]].append(Trajectory.from_record(rec, env))
        return ds


def episode_seed(base_seed: int, task_index: int, rollout: int, M: int) -> int:
    return base_seed + task_index * M + rollout


def collect(
    env: Environment,
    policy: MlpNet,
    featurizer: Featurizer,
    tasks: list,
    M: int = 10,
    temperature: float = 0.7,
    base_seed: int = 0,
) -> ExploreDataset:
    """Roll out ``policy`` M times on every task with no expert help.

    Rollout ``j`` of task ``i`` uses environment seed ``base_seed + i*M + j``
    and a sampling stream derived from that seed.
    """
    if M < 1:
        raise UsageError("M must be >= 1")
    starts = [
        start_episode(env, task, episode_seed(base_seed, i, j, M), stream=1)
        for i, task in enumerate(tasks)
        for j in range(M)
    ]
    trajs = run_episodes(env, policy, featurizer, starts, temperature)
    groups = [trajs[i * M:(i + 1) * M] for i in range(len(tasks))]
    return ExploreDataset(env.name, env.params(), M, temperature, base_seed, net_digest(policy), groups)


@dataclass
class DatasetStats:
    count: int
    reward_edges: list[float]
    reward_hist: list[int]
    length_hist: dict[int, int]
    grounding_rate: float
    mean_reward: float
    success_rate: float


def dataset_stats(ds: ExploreDataset, reward_bins: int = 10) -> DatasetStats:
    trajs = ds.trajectories
    if not trajs:
        raise UsageError("dataset_stats() of an empty dataset")
    rewards = np.array([t.reward for t in trajs])
    hist, edges = np.histogram(rewards, bins=reward_bins, range=(0.0, 1.0))
    lengths: dict[int, int] = {}
    for t in trajs:
        lengths[len(t)] = lengths.get(len(t), 0) + 1
    return DatasetStats(
        count=len(trajs),
        reward_edges=edges.tolist(),
        reward_hist=hist.tolist(),
        length_hist=dict(sorted(lengths.items())),
        grounding_rate=float(np.mean([grounding_accuracy(t) for t in trajs])),
        mean_reward=float(rewards.mean()),
        success_rate=float(np.mean(rewards == 1.0)),
    )
