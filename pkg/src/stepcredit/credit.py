"""Turning a terminal reward into per-step rewards.

The progress estimator scores every step of a trajectory and is fitted so that
the scores of a trajectory add up to its terminal reward.  It comes in two
modes:

``direct``
    The net reads the history before step ``t`` plus the one-hot action taken
    and outputs the step's contribution.
``potential``
    The net reads the history *including* step ``t`` and outputs a potential;
    a step's contribution is the change in potential, with the potential of the
    empty history fixed at 0, so contributions telescope to the final potential.

Alongside it live the comparison redistributions (Monte Carlo value
differences, uniform noise, equal shares, and the untouched sparse reward).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .agentcore import EpisodeStart, Featurizer, run_episodes
from .envsim import Environment, Trajectory
from .errors import UsageError
from .tinynn import MlpNet, Optimizer, load_net, save_net

MODES = ("direct", "potential")
STRATEGIES = ("spa", "mc", "random", "mean", "none")


@dataclass
class ContributionProfile:
    contributions: np.ndarray
    predicted_completion: float

    def __len__(self) -> int:
        return len(self.contributions)


class ProgressEstimator:
    def __init__(
        self,
        featurizer: Featurizer,
        mode: str = "direct",
        hidden=(64, 64),
        rng: np.random.Generator | None = None,
        activation: str = "tanh",
        zero_init: bool = False,
        net: MlpNet | None = None,
        zero_output: bool = False,
    ):
        """``zero_init`` zeroes every layer; ``zero_output`` only the output layer, so
        untrained contributions are 0 while the hidden features stay random."""
        if mode not in MODES:
            raise UsageError(f"unknown estimator mode {mode!r}")
        self.featurizer = featurizer
        self.mode = mode
        in_dim = featurizer.width + (featurizer.num_actions if mode == "direct" else 0)
        if net is None:
            net = MlpNet([in_dim, *hidden, 1], activation, rng, zero_init=zero_init)
            if zero_output:
                net.weights[-1][...] = 0.0
        elif net.in_dim != in_dim or net.out_dim != 1:
            raise UsageError("estimator net has the wrong shape")
        self.net = net

    def inputs(self, traj: Trajectory) -> np.ndarray:
        n = len(traj)
        if self.mode == "direct":
            onehot = np.zeros((n, self.featurizer.num_actions))
            onehot[np.arange(n), traj.actions] = 1.0
            return np.hstack([self.featurizer.prefixes(traj), onehot])
        return self.featurizer.prefixes(traj, np.arange(1, n + 1))

    def _forward(self, trajs: list[Trajectory]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Net outputs, per-step contributions and segment starts for a batch."""
        X = np.concatenate([self.inputs(t) for t in trajs])
        out = self.net.forward(X)[:, 0]
        lengths = np.array([len(t) for t in trajs])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        if self.mode == "direct":
            c = out
        else:
            prev = np.concatenate([[0.0], out[:-1]])
            prev[starts] = 0.0  # potential of the empty history
            c = out - prev
        return out, c, starts

    def potentials(self, traj: Trajectory) -> np.ndarray:
        """Potentials of histories of length 1..n (potential mode only)."""
        if self.mode != "potential":
            raise UsageError("potentials() needs a potential-mode estimator")
        return self.net.forward(self.inputs(traj))[:, 0]

    def predict(self, traj: Trajectory) -> ContributionProfile:
        if len(traj) == 0:
            raise UsageError("cannot score an empty trajectory")
        _, c, _ = self._forward([traj])
        return ContributionProfile(c, float(np.sum(c)))

    def loss_and_grads(self, trajs: list[Trajectory]) -> tuple[float, list[np.ndarray]]:
        """Mean of (sum of contributions - R)^2 over ``trajs`` and its parameter gradients.

        The gradient of a trajectory's squared error reaches every one of its
        steps through the sum; in potential mode it then flows through the
        differences, which leaves only the final potential with a nonzero
        gradient.
        """
        out, c, starts = self._forward(trajs)
        r_hat = np.add.reduceat(c, starts)
        target = np.array([t.reward for t in trajs])
        resid = r_hat - target
        loss = float(np.mean(resid**2))
        lengths = np.array([len(t) for t in trajs])
        dc = np.repeat(2.0 * resid / len(trajs), lengths)
        if self.mode == "direct":
            dout = dc
        else:
            nxt = np.concatenate([dc[1:], [0.0]])
            ends = starts + lengths - 1
            nxt[ends] = 0.0
            dout = dc - nxt
        grads, _ = self.net.backward(dout[:, None])
        return loss, grads

    def save(self, path) -> None:
        save_net(self.net, path, {"kind": "progress_estimator", "mode": self.mode})

    @classmethod
    def load(cls, path, featurizer: Featurizer) -> ProgressEstimator:
        net, meta = load_net(path)
        if meta.get("kind") != "progress_estimator":
            raise UsageError(f"{path}: not an estimator checkpoint")
        return cls(featurizer, meta["mode"], net=net)


def train_estimator(
    est: ProgressEstimator,
    trajectories: list[Trajectory],
    opt: Optimizer | None = None,
    epochs: int = 1,
    batch_size: int = 8,
    rng: np.random.Generator | None = None,
) -> tuple[ProgressEstimator, list[float]]:
    """Fit the estimator on all trajectories (successes and failures alike).

    Returns the estimator and the loss of every minibatch.
    """
    if not trajectories:
        raise UsageError("train_estimator() needs a non-empty dataset")
    opt = opt if opt is not None else Optimizer("adam", 1e-3)
    rng = rng if rng is not None else np.random.default_rng(0)
    losses = []
    n = len(trajectories)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = [trajectories[i] for i in order[start:start + batch_size]]
            loss, grads = est.loss_and_grads(batch)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite estimator loss at minibatch {len(losses)}")
            opt.step(est.net, grads)
            losses.append(loss)
    return est, losses


def predict_contributions(est: ProgressEstimator, traj: Trajectory) -> ContributionProfile:
    return est.predict(traj)


def fuse_rewards(profile: ContributionProfile, grounded, alpha: float = 1.0, beta: float = 0.5) -> np.ndarray:
    g = np.asarray(grounded, dtype=np.float64)
    if g.shape != profile.contributions.shape:
        raise UsageError(f"{len(g)} grounding bits for {len(profile)} contributions")
    return alpha * profile.contributions + beta * g


def mc_values(
    env: Environment,
    policy: MlpNet,
    featurizer: Featurizer,
    trajs: list[Trajectory],
    rollouts_per_step: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> list[np.ndarray]:
    """Monte Carlo estimates of the expected terminal reward after each prefix.

    Entry ``t`` of each returned array estimates the value after the first
    ``t`` actions (``t = 0..n``); entry ``n`` is the realized reward.  Prefix
    states are restored by replaying the recorded actions from reset.
    """
    starts: list[EpisodeStart] = []
    for traj in trajs:
        state, obs = env.reset(traj.task, traj.seed)
        for t in range(len(traj)):
            for g in rng.spawn(rollouts_per_step):
                starts.append(EpisodeStart(state, traj.prefix(t), g))
            state, _ = env.step(state, traj.actions[t])
    X = np.concatenate([np.repeat(featurizer.prefixes(t), rollouts_per_step, axis=0) for t in trajs])
    finals = run_episodes(env, policy, featurizer, starts, temperature, X)
    out, k = [], 0
    for traj in trajs:
        n = len(traj)
        block = np.array([f.reward for f in finals[k:k + n * rollouts_per_step]])
        k += n * rollouts_per_step
        values = np.empty(n + 1)
        values[:n] = block.reshape(n, rollouts_per_step).mean(axis=1)
        values[n] = traj.reward
        out.append(values)
    return out


def mc_redistribute(
    env: Environment,
    policy: MlpNet,
    featurizer: Featurizer,
    traj: Trajectory,
    rollouts_per_step: int = 5,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> np.ndarray:
    """Per-step rewards as differences of Monte Carlo value estimates.

    Reward ``t`` is the estimated value after step ``t`` minus the estimate
    after step ``t-1``; the rewards therefore sum to ``R`` minus the initial
    value estimate.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    values = mc_values(env, policy, featurizer, [traj], rollouts_per_step, rng, temperature)[0]
    return np.diff(values)


def equal_shares(total: float, n: int) -> np.ndarray:
    """``n`` shares of ``total``, equal up to one unit in the last place, that add up to ``total`` exactly.

    ``total`` is written as an integer count of units ``2**(e-53)``; the units are
    dealt out as evenly as possible.  Every partial sum is then an integer
    multiple of the unit below ``2**53``, so any summation order is exact.
    """
    if n < 1:
        raise UsageError("need at least one share")
    if total == 0.0 or not math.isfinite(total):
        return np.full(n, total / n)
    mant, exp = math.frexp(abs(total))
    units = int(math.ldexp(mant, 53))
    base, extra = divmod(units, n)
    counts = [base] * (n - extra) + [base + 1] * extra
    return np.array([math.copysign(math.ldexp(c, exp - 53), total) for c in counts])


def baseline_redistribute(kind: str, traj: Trajectory, rng: np.random.Generator | None = None) -> np.ndarray:
    n = len(traj)
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rng.uniform(0.0, 1.0, size=n)
    if kind == "mean":
        return equal_shares(traj.reward, n)
    if kind == "none":
        out = np.zeros(n)
        out[-1] = traj.reward
        return out
    raise UsageError(f"unknown baseline redistribution {kind!r}")


@dataclass
class RedistributionStrategy:
    kind: str = "spa"
    alpha: float = 1.0
    beta: float = 0.5
    add_terminal: bool = False
    mc_rollouts: int = 5
    mc_temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")

    def rewards(
        self,
        trajs: list[Trajectory],
        rng: np.random.Generator,
        estimator: ProgressEstimator | None = None,
        env: Environment | None = None,
        policy: MlpNet | None = None,
        featurizer: Featurizer | None = None,
    ) -> list[np.ndarray]:
        if self.kind == "spa":
            if estimator is None:
                raise UsageError("the spa strategy needs a trained estimator")
            out = [fuse_rewards(estimator.predict(t), t.grounded, self.alpha, self.beta) for t in trajs]
            if self.add_terminal:
                for r, t in zip(out, trajs):
                    r[-1] += t.reward
            return out
        if self.kind == "mc":
            if env is None or policy is None or featurizer is None:
                raise UsageError("the mc strategy needs env, policy and featurizer")
            values = mc_values(env, policy, featurizer, trajs, self.mc_rollouts, rng, self.mc_temperature)
            return [np.diff(v) for v in values]
        return [baseline_redistribute(self.kind, t, rng) for t in trajs]


def profile_rows(traj: Trajectory, profile: ContributionProfile, fused: np.ndarray) -> list[dict]:
    """Per-step inspection rows: step index, contribution, grounding bit, fused reward."""
    return [
        {"step": t + 1, "contribution": float(c), "grounded": int(g), "fused": float(r)}
        for t, (c, g, r) in enumerate(zip(profile.contributions, traj.grounded, fused))
    ]
