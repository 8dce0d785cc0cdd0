"""Greedy evaluation and metric persistence."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..agentcore import Featurizer, rollout_tasks
from ..envsim import Environment, Trajectory, grounding_accuracy
from ..errors import UsageError
from ..tinynn import MlpNet

BIN_WIDTH = 5


def interval_label(length: int, width: int = BIN_WIDTH) -> str:
    lo = (length // width) * width
    return f"{lo}-{lo + width - 1}"


def interval_bins(horizon: int, width: int = BIN_WIDTH) -> list[str]:
    return [interval_label(lo, width) for lo in range(0, horizon + 1, width)]


@dataclass
class MetricsRecord:
    """One evaluation.

    ``interval_counts`` buckets every evaluated episode by its length and
    ``interval_successes`` the successful ones, so the counts add up to
    ``episodes``.
    """

    stage: str
    iteration: int
    episodes: int
    successes: int
    success_rate: float
    mean_reward: float
    grounding_accuracy: float
    mean_length: float
    interval_counts: dict = field(default_factory=dict)
    interval_successes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        # JSON with sorted keys puts "10-14" before "5-9"; restore numeric order
        order = lambda kv: int(kv[0].split("-")[0])  # noqa: E731
        self.interval_counts = dict(sorted(self.interval_counts.items(), key=order))
        self.interval_successes = dict(sorted(self.interval_successes.items(), key=order))

    def check(self) -> None:
        if not 0.0 <= self.success_rate <= 1.0 or not 0.0 <= self.grounding_accuracy <= 1.0:
            raise AssertionError("rates must lie in [0, 1]")
        if sum(self.interval_counts.values()) != self.episodes:
            raise AssertionError("interval counts do not add up to the number of episodes")
        if self.success_rate != self.successes / self.episodes:
            raise AssertionError("success rate is not successes / episodes")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def summarize(trajs: list[Trajectory], horizon: int, stage: str = "eval", iteration: int = 0) -> MetricsRecord:
    if not trajs:
        raise UsageError("nothing to summarize")
    bins = interval_bins(horizon)
    counts = dict.fromkeys(bins, 0)
    succ = dict.fromkeys(bins, 0)
    wins = 0
    for t in trajs:
        label = interval_label(len(t))
        counts[label] += 1
        if t.reward == 1.0:
            succ[label] += 1
            wins += 1
    rec = MetricsRecord(
        stage=stage,
        iteration=iteration,
        episodes=len(trajs),
        successes=wins,
        success_rate=wins / len(trajs),
        mean_reward=float(np.mean([t.reward for t in trajs])),
        grounding_accuracy=float(np.mean([grounding_accuracy(t) for t in trajs])),
        mean_length=float(np.mean([len(t) for t in trajs])),
        interval_counts=counts,
        interval_successes=succ,
    )
    rec.check()
    return rec


def evaluate(
    env: Environment,
    policy: MlpNet,
    featurizer: Featurizer,
    tasks: list,
    seeds: list[int],
    stage: str = "eval",
    iteration: int = 0,
) -> MetricsRecord:
    """Greedy (temperature 0) rollout of every task under every environment seed."""
    if not tasks:
        raise UsageError("evaluate() needs at least one task")
    pairs = [(task, s) for s in seeds for task in tasks]
    trajs = rollout_tasks(env, policy, featurizer, [p[0] for p in pairs], [p[1] for p in pairs], temperature=0.0)
    return summarize(trajs, env.horizon, stage, iteration)


CSV_FIELDS = ["stage", "iteration", "episodes", "successes", "success_rate", "mean_reward", "grounding_accuracy", "mean_length"]


def write_metrics(records: list[MetricsRecord], directory: str | Path) -> None:
    """``metrics.jsonl`` (one record per line) and a flat ``metrics.csv`` with interval columns."""
    directory = Path(directory)
    with open(directory / "metrics.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    bins = list(records[0].interval_counts) if records else []
    with open(directory / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS + [f"count_{b}" for b in bins] + [f"succ_{b}" for b in bins])
        for r in records:
            row = [getattr(r, k) for k in CSV_FIELDS]
            row += [r.interval_counts[b] for b in bins] + [r.interval_successes[b] for b in bins]
            w.writerow(row)


def read_metrics(directory: str | Path) -> list[MetricsRecord]:
    path = Path(directory) / "metrics.jsonl"
    if not path.exists():
        raise UsageError(f"{directory}: no metrics.jsonl")
    with open(path) as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]
