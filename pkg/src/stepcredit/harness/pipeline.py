"""The staged training pipeline: bc -> explore -> estimator -> rl -> eval.

Each seed gets its own directory under ``cfg.output_dir``.  A stage writes its
artifacts and then a ``<stage>.done`` marker; a later invocation loads the
artifacts of finished stages instead of recomputing them.  Every stage draws
randomness only from ``default_rng([seed, stage_id])``, so an interrupted and
resumed run produces the same files as an uninterrupted one.

Wall-clock times go to ``timings.json`` and nowhere else, which keeps every
other file byte-reproducible.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agentcore import Featurizer, behavior_clone, make_policy, make_value, rollout_tasks
from ..credit import ProgressEstimator, RedistributionStrategy, train_estimator
from ..envsim import Environment, Trajectory, expert_rollout, make_env
from ..errors import InvariantViolation, UsageError
from ..explorer import ExploreDataset, collect, dataset_stats
from ..rltrain import RolloutBatch, ppo_update, trajectory_baseline_update
from ..tinynn import MlpNet, Optimizer, load_net, save_net
from .config import RunConfig
from .metrics import MetricsRecord, evaluate, write_metrics

log = logging.getLogger(__name__)

STAGES = ("bc", "explore", "estimator", "rl", "eval")
STAGE_IDS = {name: i + 1 for i, name in enumerate(STAGES)}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STAGE_IDS[stage]])


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / f"seed_{seed}"


@dataclass
class SeedRun:
    """State shared between the stages of one seed."""

    cfg: RunConfig
    seed: int
    directory: Path
    env: Environment
    featurizer: Featurizer
    timings: dict = field(default_factory=dict)
    experts: list[Trajectory] | None = None
    base_policy: MlpNet | None = None
    dataset: ExploreDataset | None = None
    estimator: ProgressEstimator | None = None
    policy: MlpNet | None = None

    def path(self, name: str) -> Path:
        return self.directory / name

    def done(self, stage: str) -> bool:
        return self.path(f"{stage}.done").exists()

    def mark(self, stage: str) -> None:
        self.path(f"{stage}.done").write_text("ok\n")

    def net_meta(self, kind: str) -> dict:
        return {
            "kind": kind,
            "env": self.env.name,
            "env_params": self.env.params(),
            "history_k": self.featurizer.history_k,
            "seed": self.seed,
        }


def _stage_needed(cfg: RunConfig, stage: str) -> bool:
    if stage in ("explore", "estimator"):
        return cfg.uses_estimator
    return True


# --------------------------------------------------------------------------
# stages


def stage_bc(run: SeedRun) -> None:
    cfg, rng = run.cfg, stage_rng(run.seed, "bc")
    tasks = run.env.tasks(cfg.train_ids)
    seeds = rng.integers(0, 2**31 - 1, size=len(tasks))
    run.experts = [expert_rollout(run.env, t, int(s)) for t, s in zip(tasks, seeds)]
    with open(run.path("experts.jsonl"), "w") as fh:
        for t in run.experts:
            fh.write(json.dumps(t.to_record(), sort_keys=True) + "\n")
    policy = make_policy(run.featurizer, tuple(cfg.net.hidden), rng, cfg.net.activation)
    n_steps = sum(len(t) for t in run.experts)
    per_epoch = -(-n_steps // cfg.bc.batch_size)
    opt = Optimizer(
        "adamw", cfg.bc.learning_rate, weight_decay=cfg.bc.weight_decay,
        schedule=cfg.bc.schedule, total_steps=cfg.bc.epochs * per_epoch,
    )
    _, losses = behavior_clone(policy, run.experts, run.featurizer, cfg.bc.epochs, opt, cfg.bc.batch_size, rng)
    save_net(policy, run.path("policy_base.tnn"), run.net_meta("policy"))
    run.path("bc_loss.json").write_text(json.dumps({"epoch_nll": losses}) + "\n")
    run.base_policy = policy


def load_bc(run: SeedRun) -> None:
    with open(run.path("experts.jsonl")) as fh:
        run.experts = [Trajectory.from_record(json.loads(line), run.env) for line in fh]
    run.base_policy, _ = load_net(run.path("policy_base.tnn"))


def stage_explore(run: SeedRun) -> None:
    cfg, rng = run.cfg, stage_rng(run.seed, "explore")
    base_seed = int(rng.integers(0, 2**31 - 1))
    run.dataset = collect(
        run.env, run.base_policy, run.featurizer, run.env.tasks(cfg.train_ids),
        cfg.explore.M, cfg.explore.temperature, base_seed,
    )
    run.dataset.save(run.path("explore.jsonl"))
    stats = dataset_stats(run.dataset)
    run.path("explore_stats.json").write_text(json.dumps(stats.__dict__, sort_keys=True) + "\n")


def load_explore(run: SeedRun) -> None:
    run.dataset = ExploreDataset.load(run.path("explore.jsonl"))


def stage_estimator(run: SeedRun) -> None:
    cfg, rng = run.cfg, stage_rng(run.seed, "estimator")
    ec = cfg.estimator
    est = ProgressEstimator(
        run.featurizer, ec.mode, tuple(ec.hidden), rng, ec.activation, zero_output=ec.zero_output,
    )
    _, losses = train_estimator(est, run.dataset.trajectories, Optimizer("adam", ec.learning_rate), ec.epochs, ec.batch_size, rng)
    est.save(run.path("estimator.tnn"))
    run.path("estimator_loss.json").write_text(json.dumps({"minibatch_loss": losses}) + "\n")
    run.estimator = est


def load_estimator(run: SeedRun) -> None:
    run.estimator = ProgressEstimator.load(run.path("estimator.tnn"), run.featurizer)


def _iteration_tasks(cfg: RunConfig, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Task ids and group labels of one iteration's episodes."""
    n = cfg.rl.episodes_per_iteration
    if cfg.algorithm in ("rloo", "grpo_style"):
        g = cfg.rl.group_size
        ids = rng.choice(cfg.train_ids, size=n // g)
        return np.repeat(ids, g).tolist(), np.repeat(np.arange(n // g), g).tolist()
    ids = rng.choice(cfg.train_ids, size=n).tolist()
    return ids, list(range(n))


def stage_rl(run: SeedRun) -> None:
    cfg, rng = run.cfg, stage_rng(run.seed, "rl")
    policy = run.base_policy.copy()
    value = make_value(run.featurizer, tuple(cfg.net.hidden), rng, cfg.net.activation)
    popt = Optimizer("adam", cfg.rl.policy_lr)
    vopt = Optimizer("adam", cfg.rl.value_lr)
    s = cfg.strategy
    strategy = RedistributionStrategy(s.kind, s.alpha, s.beta, s.add_terminal, s.mc_rollouts, s.mc_temperature)
    rows = []
    for it in range(cfg.rl.iterations):
        ids, groups = _iteration_tasks(cfg, rng)
        seeds = rng.integers(0, 2**31 - 1, size=len(ids)).tolist()
        trajs = rollout_tasks(run.env, policy, run.featurizer, run.env.tasks(ids), seeds, cfg.rl.temperature, stream=2)
        if cfg.algorithm == "ppo":
            rewards = strategy.rewards(trajs, rng, run.estimator, run.env, policy, run.featurizer)
            batch = RolloutBatch.build(trajs, rewards, run.featurizer)
            stats = ppo_update(policy, value, batch, cfg.ppo, popt, vopt, rng)
            stats["mean_shaped_return"] = float(np.mean([r.sum() for r in rewards]))
        else:
            stats = trajectory_baseline_update(
                policy, trajs, cfg.algorithm, run.featurizer, popt, cfg.ppo.max_grad_norm, groups,
            )
        if not policy.is_finite():
            raise InvariantViolation(f"policy parameters became non-finite at iteration {it}")
        row = {
            "iteration": it,
            "mean_return": float(np.mean([t.reward for t in trajs])),
            "success_rate": float(np.mean([t.reward == 1.0 for t in trajs])),
            "mean_length": float(np.mean([len(t) for t in trajs])),
        }
        row.update(stats)
        rows.append(row)
        log.info("seed %d iter %d: success %.3f return %.3f", run.seed, it, row["success_rate"], row["mean_return"])
    save_net(policy, run.path("policy.tnn"), run.net_meta("policy"))
    save_net(value, run.path("value.tnn"), run.net_meta("value"))
    with open(run.path("rl_log.jsonl"), "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    run.policy = policy


def load_rl(run: SeedRun) -> None:
    run.policy, _ = load_net(run.path("policy.tnn"))


def stage_eval(run: SeedRun) -> None:
    cfg = run.cfg
    tasks = run.env.tasks(cfg.test_ids)
    records: list[MetricsRecord] = [
        evaluate(run.env, run.base_policy, run.featurizer, tasks, cfg.eval.seeds, "base", 0),
        evaluate(run.env, run.policy, run.featurizer, tasks, cfg.eval.seeds, "final", cfg.rl.iterations),
    ]
    write_metrics(records, run.directory)


_RUNNERS = {
    "bc": (stage_bc, load_bc),
    "explore": (stage_explore, load_explore),
    "estimator": (stage_estimator, load_estimator),
    "rl": (stage_rl, load_rl),
    "eval": (stage_eval, None),
}


def run_seed(cfg: RunConfig, seed: int, only_stage: str | None = None) -> Path:
    """Run (or resume) every stage for one seed.

    ``only_stage`` forces that stage to be recomputed even if it is marked done,
    after making sure earlier stages are available; later stages are then
    invalidated and not run.
    """
    if only_stage is not None and only_stage not in STAGES:
        raise UsageError(f"unknown stage {only_stage!r}; expected one of {STAGES}")
    if only_stage is not None and not _stage_needed(cfg, only_stage):
        raise UsageError(f"stage {only_stage!r} does not apply to strategy {cfg.strategy.kind!r} with {cfg.algorithm}")
    directory = seed_dir(cfg, seed)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(cfg.to_json() + "\n")
    env = make_env(cfg.env.name, **cfg.env.params)
    env.tasks(cfg.train_ids + cfg.test_ids)  # ConfigError for ids the env does not have
    run = SeedRun(cfg, seed, directory, env, Featurizer(env, cfg.net.history_k))
    timings_path = directory / "timings.json"
    if timings_path.exists():
        run.timings = json.loads(timings_path.read_text())
    for stage in STAGES:
        if not _stage_needed(cfg, stage):
            continue
        fresh, load = _RUNNERS[stage]
        forced = stage == only_stage
        if run.done(stage) and not forced:
            if load is not None:
                load(run)
            continue
        log.info("seed %d: running stage %s", seed, stage)
        start = time.perf_counter()
        try:
            fresh(run)
        except InvariantViolation:
            raise
        except Exception as exc:  # noqa: BLE001 - surfaced with the stage name
            raise StageFailure(stage, exc) from exc
        run.timings[stage] = round(time.perf_counter() - start, 3)
        timings_path.write_text(json.dumps(run.timings, sort_keys=True) + "\n")
        run.mark(stage)
        if forced:
            for later in STAGES[STAGES.index(stage) + 1:]:
                run.path(f"{later}.done").unlink(missing_ok=True)
            break
    return directory


def run_pipeline(cfg: RunConfig, seeds: list[int] | None = None, only_stage: str | None = None) -> Path:
    """Run every configured seed; returns the run directory."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    for seed in seeds if seeds is not None else cfg.seeds:
        run_seed(cfg, seed, only_stage)
    return out
