"""The reward-variant comparison: the same pipeline with only the per-step
reward swapped (learned progress, Monte Carlo values, equal shares, uniform
noise, and the untouched sparse reward).  All arms share the task split,
seeds and RL sample budget."""
from __future__ import annotations

from pathlib import Path

from .config import RunConfig

ARMS = ("spa", "none", "mc", "mean", "random")


def arm_configs(base: RunConfig, out_root: str | Path, arms=ARMS) -> dict[str, RunConfig]:
    out_root = Path(out_root)
    return {
        arm: base.with_overrides(**{"name": arm, "strategy.kind": arm, "algorithm": "ppo", "output_dir": str(out_root / arm)})
        for arm in arms
    }
