"""PPO with GAE over arbitrary per-step reward streams, plus trajectory-level
policy-gradient baselines (REINFORCE, leave-one-out, group-normalized)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .agentcore import Featurizer
from .envsim import Trajectory
from .errors import ConfigError, UsageError
from .tinynn import MlpNet, Optimizer, clip_grad_norm, log_softmax


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    minibatch_size: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 1.0
    normalize_advantages: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must lie in [0, 1]")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be > 0")
        if self.ppo_epochs < 1 or self.minibatch_size < 1:
            raise ConfigError("ppo_epochs and minibatch_size must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    value_targets: np.ndarray
    deltas: np.ndarray


def compute_gae(rewards, values, bootstrap: float = 0.0, gamma: float = 0.99, lam: float = 0.95) -> AdvantageBatch:
    """delta_t = r_t + gamma V_{t+1} - V_t (V_{n} = bootstrap), A_t = sum_k (gamma lam)^k delta_{t+k}."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1:
        raise UsageError(f"{r.size} rewards but {v.size} values")
    nxt = np.append(v[1:], bootstrap)
    deltas = r + gamma * nxt - v
    adv = np.empty_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return AdvantageBatch(adv, adv + v, deltas)


def vanishing_advantage_report(
    n: int,
    gamma: float,
    lam: float,
    reward_expectation: float,
    realized_reward: float | None = None,
) -> list[dict]:
    """GAE advantages of a sparse-reward episode under a converged value function.

    States ``s_1 .. s_n``; the value of ``s_t`` (t < n) is
    ``gamma**(n-t-1) * E[r_n]`` (built by repeated multiplication so the TD
    errors of intermediate steps cancel exactly) and ``V(s_n) = 0``.  For
    ``t = 1 .. n-1``, ``delta_t = r_{t+1} + gamma V(s_{t+1}) - V(s_t)`` where
    only ``r_n`` may be nonzero.  Each row also carries the closed form
    ``(gamma lam)**(n-1-t) * delta_{n-1}``.
    """
    if n < 2:
        raise UsageError("need n >= 2")
    realized = reward_expectation if realized_reward is None else realized_reward
    values = np.empty(n - 1)
    values[-1] = reward_expectation
    for i in range(n - 3, -1, -1):
        values[i] = gamma * values[i + 1]
    rewards = np.zeros(n - 1)
    rewards[-1] = realized
    batch = compute_gae(rewards, values, 0.0, gamma, lam)
    last = batch.deltas[-1]
    return [
        {
            "t": t + 1,
            "value": float(values[t]),
            "delta": float(batch.deltas[t]),
            "advantage": float(batch.advantages[t]),
            "closed_form": float((gamma * lam) ** (n - 2 - t) * last),
        }
        for t in range(n - 1)
    ]


@dataclass
class RolloutBatch:
    """Flattened steps of a set of trajectories."""

    X: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    rewards: list[np.ndarray]
    lengths: np.ndarray

    @classmethod
    def build(cls, trajs: list[Trajectory], rewards: list[np.ndarray], featurizer: Featurizer) -> RolloutBatch:
        if len(trajs) != len(rewards):
            raise UsageError("one reward stream per trajectory required")
        for t, r in zip(trajs, rewards):
            if len(r) != len(t):
                raise UsageError("reward stream length does not match trajectory")
            if len(t.logprobs) != len(t):
                raise UsageError("trajectories need behaviour log-probs")
        return cls(
            X=np.concatenate([featurizer.prefixes(t) for t in trajs]),
            actions=np.concatenate([np.asarray(t.actions) for t in trajs]),
            old_logp=np.concatenate([np.asarray(t.logprobs) for t in trajs]),
            rewards=[np.asarray(r, dtype=np.float64) for r in rewards],
            lengths=np.array([len(t) for t in trajs]),
        )


def advantages_for(batch: RolloutBatch, value: MlpNet, cfg: PpoConfig) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and value targets for every step (episodes end with bootstrap 0)."""
    v = value.forward(batch.X)[:, 0]
    adv, targets = [], []
    k = 0
    for r, n in zip(batch.rewards, batch.lengths):
        ab = compute_gae(r, v[k:k + n], 0.0, cfg.gamma, cfg.lam)
        adv.append(ab.advantages)
        targets.append(ab.value_targets)
        k += n
    return np.concatenate(adv), np.concatenate(targets)


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, clip_eps: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def ppo_policy_loss(
    policy: MlpNet,
    X: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    adv: np.ndarray,
    clip_eps: float,
    entropy_coef: float,
) -> tuple[float, list[np.ndarray], dict]:
    """Negative clipped surrogate minus entropy bonus, with parameter gradients."""
    logits = policy.forward(X)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    idx = np.arange(len(actions))
    logp = logp_all[idx, actions]
    ratio = np.exp(logp - old_logp)
    surr = clipped_surrogate(ratio, adv, clip_eps)
    entropy = -(p * logp_all).sum(axis=1)
    m = len(actions)
    loss = float(-surr.mean() - entropy_coef * entropy.mean())
    # the min() picks the unclipped term unless the ratio left the trust region in the advantage's direction
    clipped = ((adv > 0) & (ratio > 1.0 + clip_eps)) | ((adv < 0) & (ratio < 1.0 - clip_eps))
    coef = np.where(clipped, 0.0, ratio * adv)
    dlogits = -p * coef[:, None]
    dlogits[idx, actions] += coef
    dent = -p * (logp_all + entropy[:, None])
    dlogits = -(dlogits + entropy_coef * dent) / m
    grads, _ = policy.backward(dlogits)
    stats = {
        "policy_loss": float(-surr.mean()),
        "entropy": float(entropy.mean()),
        "clip_frac": float(clipped.mean()),
        "approx_kl": float(np.mean(old_logp - logp)),
    }
    return loss, grads, stats


def value_loss(value: MlpNet, X: np.ndarray, targets: np.ndarray, value_coef: float) -> tuple[float, list[np.ndarray]]:
    v = value.forward(X)[:, 0]
    diff = v - targets
    loss = float(np.mean(diff**2))
    grads, _ = value.backward((2.0 * value_coef * diff / len(diff))[:, None])
    return loss, grads


def _check_finite(name: str, x: float, batch: RolloutBatch) -> None:
    if not math.isfinite(x):
        raise FloatingPointError(
            f"{name} is {x} (batch of {len(batch.lengths)} episodes, {len(batch.actions)} steps, "
            f"reward range [{min(r.min() for r in batch.rewards)}, {max(r.max() for r in batch.rewards)}])"
        )


def ppo_update(
    policy: MlpNet,
    value: MlpNet,
    batch: RolloutBatch,
    cfg: PpoConfig,
    policy_opt: Optimizer,
    value_opt: Optimizer,
    rng: np.random.Generator,
) -> dict:
    """Several epochs of shuffled-minibatch PPO on one batch of collected episodes.

    Ratios use the behaviour log-probs stored at collection time; advantages and
    value targets are computed once, from the value net before the update.
    """
    adv, targets = advantages_for(batch, value, cfg)
    if cfg.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(batch.actions)
    sums: dict[str, float] = {}
    count = 0
    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            ploss, pgrads, stats = ppo_policy_loss(
                policy, batch.X[idx], batch.actions[idx], batch.old_logp[idx], adv[idx],
                cfg.clip_eps, cfg.entropy_coef,
            )
            vloss, vgrads = value_loss(value, batch.X[idx], targets[idx], cfg.value_coef)
            _check_finite("policy loss", ploss, batch)
            _check_finite("value loss", vloss, batch)
            clip_grad_norm(pgrads, cfg.max_grad_norm)
            clip_grad_norm(vgrads, cfg.max_grad_norm)
            policy_opt.step(policy, pgrads)
            value_opt.step(value, vgrads)
            stats["value_loss"] = vloss
            for key, val in stats.items():
                sums[key] = sums.get(key, 0.0) + val
            count += 1
    return {key: val / count for key, val in sums.items()}


def trajectory_weights(returns, groups, kind: str) -> np.ndarray:
    """Per-trajectory gradient weights.

    ``reinforce`` uses the return itself; ``rloo`` subtracts the mean return of
    the other rollouts of the same group; ``grpo_style`` standardizes within the
    group (population std, plus 1e-8).
    """
    R = np.asarray(returns, dtype=np.float64)
    if kind == "reinforce":
        return R.copy()
    if kind not in ("rloo", "grpo_style"):
        raise UsageError(f"unknown trajectory baseline {kind!r}")
    groups = np.asarray(groups)
    w = np.empty_like(R)
    for g in np.unique(groups):
        m = groups == g
        k = int(m.sum())
        if k < 2:
            raise UsageError(f"{kind} needs at least 2 rollouts per group; group {g} has {k}")
        # offsets from the first member keep a tied group exactly at zero
        d = R[m] - R[m][0]
        centered = d - d.mean()
        if kind == "rloo":
            # R_j - mean of the others = k/(k-1) * (R_j - group mean)
            w[m] = centered * (k / (k - 1))
        else:
            w[m] = centered / (d.std() + 1e-8)
    return w


def trajectory_baseline_update(
    policy: MlpNet,
    trajs: list[Trajectory],
    kind: str,
    featurizer: Featurizer,
    opt: Optimizer,
    max_grad_norm: float = 1.0,
    groups=None,
) -> dict:
    """One policy-gradient step where every step of a trajectory shares its weight.

    Groups default to task ids.
    """
    groups = [t.task.task_id for t in trajs] if groups is None else groups
    w = trajectory_weights([t.reward for t in trajs], groups, kind)
    X = np.concatenate([featurizer.prefixes(t) for t in trajs])
    actions = np.concatenate([np.asarray(t.actions) for t in trajs])
    step_w = np.repeat(w, [len(t) for t in trajs])
    loss, grads = weighted_logprob_loss(policy, X, actions, step_w)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite {kind} loss")
    clip_grad_norm(grads, max_grad_norm)
    opt.step(policy, grads)
    return {"policy_loss": loss, "mean_weight": float(w.mean()), "zero_signal": bool(np.all(w == 0))}


def weighted_logprob_loss(policy: MlpNet, X: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """``-mean(weights * log pi(a|x))`` and its gradient."""
    logits = policy.forward(X)
    logp_all = log_softmax(logits)
    idx = np.arange(len(actions))
    loss = float(-(weights * logp_all[idx, actions]).mean())
    dlogits = np.exp(logp_all) * weights[:, None]
    dlogits[idx, actions] -= weights
    grads, _ = policy.backward(dlogits / len(actions))
    return loss, grads


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out
