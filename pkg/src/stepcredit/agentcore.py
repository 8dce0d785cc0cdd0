"""History featurization, categorical policies, batched rollouts and behavior cloning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envsim import Environment, EnvState, Trajectory
from .errors import UsageError
from .tinynn import MlpNet, Optimizer, log_softmax, softmax


class Featurizer:
    """Fixed-width encoding of (task, interaction history).

    Layout: ``task goal encoding | initial observation one-hot | K history
    blocks | t / max_steps``.  History block ``s`` holds the step taken ``s+1``
    steps ago as ``action one-hot | observation one-hot | grounded bit``;
    slots older than the start of the episode stay zero.
    """

    def __init__(self, env: Environment, history_k: int = 8):
        if history_k < 0:
            raise UsageError("history_k must be >= 0")
        self.env = env
        self.history_k = int(history_k)
        self.num_actions = env.action_space.count
        self.num_obs = env.num_observations
        self.block = self.num_actions + self.num_obs + 1
        self.init_offset = env.task_width
        self.hist_offset = self.init_offset + self.num_obs
        self.width = self.hist_offset + self.history_k * self.block + 1
        self._task_cache: dict[int, np.ndarray] = {}

    def _task_vec(self, task) -> np.ndarray:
        vec = self._task_cache.get(task.task_id)
        if vec is None:
            vec = self.env.encode_task(task)
            self._task_cache[task.task_id] = vec
        return vec

    def prefixes(self, traj: Trajectory, lengths=None) -> np.ndarray:
        """One row per prefix length (default ``0 .. len(traj) - 1``: the policy inputs)."""
        n = len(traj)
        lengths = np.arange(n) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.size and (lengths.min() < 0 or lengths.max() > n):
            raise UsageError("prefix length outside the trajectory")
        X = np.zeros((lengths.size, self.width))
        X[:, : self.init_offset] = self._task_vec(traj.task)
        X[:, self.init_offset + traj.initial_obs] = 1.0
        if n:
            acts = np.asarray(traj.actions)
            obs = np.asarray(traj.observations)
            grd = np.asarray(traj.grounded, dtype=np.float64)
            for s in range(self.history_k):
                j = lengths - 1 - s
                rows = np.nonzero(j >= 0)[0]
                if rows.size == 0:
                    break
                jj = j[rows]
                off = self.hist_offset + s * self.block
                X[rows, off + acts[jj]] = 1.0
                X[rows, off + self.num_actions + obs[jj]] = 1.0
                X[rows, off + self.num_actions + self.num_obs] = grd[jj]
        X[:, -1] = lengths / traj.task.max_steps
        return X

    def advance(self, X: np.ndarray, actions, observations, grounded) -> None:
        """Update rows of ``X`` in place for one more step of each history.

        History blocks shift back by one and the new step becomes the most
        recent block; the step-index column is left to the caller.
        """
        if self.history_k == 0:
            return
        h, b, k = self.hist_offset, self.block, self.history_k
        X[:, h + b:h + k * b] = X[:, h:h + (k - 1) * b].copy()
        X[:, h:h + b] = 0.0
        rows = np.arange(len(X))
        X[rows, h + np.asarray(actions)] = 1.0
        X[rows, h + self.num_actions + np.asarray(observations)] = 1.0
        X[:, h + self.num_actions + self.num_obs] = grounded

    def featurize(self, history: Trajectory, t: int | None = None) -> np.ndarray:
        """Features of the full ``history`` (the state before the next action)."""
        t = len(history) if t is None else t
        if t > len(history) + 1:
            raise UsageError("step index beyond the history")
        x = self.prefixes(history, [len(history)])[0]
        x[-1] = t / history.task.max_steps
        return x


def make_policy(featurizer: Featurizer, hidden=(64, 64), rng=None, activation="tanh") -> MlpNet:
    return MlpNet([featurizer.width, *hidden, featurizer.num_actions], activation, rng)


def make_value(featurizer: Featurizer, hidden=(64, 64), rng=None, activation="tanh") -> MlpNet:
    return MlpNet([featurizer.width, *hidden, 1], activation, rng)


def _choose(logits: np.ndarray, temperature: float, u: float) -> tuple[int, float]:
    if temperature == 0:
        return int(np.argmax(logits)), 0.0
    logp = log_softmax(logits / temperature)
    cdf = np.cumsum(np.exp(logp))
    a = min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), logits.size - 1)
    return a, float(logp[a])


def _choose_batch(logits: np.ndarray, temperature: float, u: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``_choose`` with the same arithmetic, so both give identical draws."""
    if temperature == 0:
        return logits.argmax(axis=1), np.zeros(len(logits))
    logp = log_softmax(logits / temperature)
    cdf = np.cumsum(np.exp(logp), axis=1)
    a = np.minimum((cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1), logits.shape[1] - 1)
    return a, logp[np.arange(len(a)), a]


def sample_action(policy: MlpNet, x: np.ndarray, temperature: float, rng: np.random.Generator) -> tuple[int, float]:
    """Temperature 0 is greedy (lowest id wins ties) and reports logprob 0.

    Otherwise the action is drawn from ``softmax(logits / temperature)`` and the
    log-probability under that same distribution is returned.
    """
    if temperature < 0:
        raise UsageError("temperature must be >= 0")
    logits = policy.forward(x)
    return _choose(logits, temperature, rng.random() if temperature > 0 else 0.0)


@dataclass
class EpisodeStart:
    state: EnvState
    history: Trajectory
    rng: np.random.Generator | None = None


def start_episode(env: Environment, task, seed: int, stream: int = 0) -> EpisodeStart:
    state, obs = env.reset(task, seed)
    rng = np.random.default_rng([int(seed), task.task_id, 0x5EED, stream])
    return EpisodeStart(state, Trajectory(task, seed, obs), rng)


def run_episodes(
    env: Environment,
    policy: MlpNet,
    featurizer: Featurizer,
    starts: list[EpisodeStart],
    temperature: float = 1.0,
    features: np.ndarray | None = None,
) -> list[Trajectory]:
    """Advance every episode to termination in lockstep.

    Each episode draws from its own generator, so results do not depend on
    how episodes are grouped into a call.  The histories in ``starts`` are
    extended in place and returned.  ``features`` may supply the precomputed
    feature rows of the starting histories.
    """
    if temperature > 0 and any(s.rng is None for s in starts):
        raise UsageError("sampling episodes need a generator each")
    states = [s.state for s in starts]
    trajs = [s.history for s in starts]
    active = np.array([i for i, st in enumerate(states) if not st.done], dtype=np.int64)
    if active.size == 0:
        return trajs
    if features is not None:
        if len(features) != len(starts):
            raise UsageError("one feature row per start required")
        X = np.array(features[active], dtype=np.float64)
    else:
        X = np.stack([featurizer.featurize(trajs[i]) for i in active])
    horizons = np.array([trajs[i].task.max_steps for i in active], dtype=np.float64)
    while active.size:
        logits = policy.forward(X)
        if logits.ndim == 1:
            logits = logits[None, :]
        u = np.array([starts[i].rng.random() for i in active]) if temperature > 0 else None
        acts, logps = _choose_batch(logits, temperature, u)
        obs = np.empty(active.size, dtype=np.int64)
        grd = np.empty(active.size)
        keep = np.ones(active.size, dtype=bool)
        for row, i in enumerate(active):
            states[i], result = env.step(states[i], int(acts[row]))
            trajs[i].append(int(acts[row]), result, float(logps[row]))
            obs[row] = result.observation_id
            grd[row] = result.grounded
            keep[row] = not result.done
        featurizer.advance(X, acts, obs, grd)
        X[:, -1] = np.array([len(trajs[i]) for i in active]) / horizons
        active, X, horizons = active[keep], X[keep], horizons[keep]
    return trajs


def rollout_tasks(env, policy, featurizer, tasks, seeds, temperature=1.0, stream=0) -> list[Trajectory]:
    starts = [start_episode(env, task, seed, stream) for task, seed in zip(tasks, seeds)]
    return run_episodes(env, policy, featurizer, starts, temperature)


def _bc_arrays(expert_set: list[Trajectory], featurizer: Featurizer) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([featurizer.prefixes(t) for t in expert_set])
    y = np.concatenate([np.asarray(t.actions) for t in expert_set])
    return X, y


def nll(policy: MlpNet, X: np.ndarray, y: np.ndarray) -> float:
    logp = log_softmax(policy.forward(X))
    return float(-logp[np.arange(len(y)), y].mean())


def action_accuracy(policy: MlpNet, trajs: list[Trajectory], featurizer: Featurizer) -> float:
    X, y = _bc_arrays(trajs, featurizer)
    return float((policy.forward(X).argmax(axis=1) == y).mean())


def behavior_clone(
    policy: MlpNet,
    expert_set: list[Trajectory],
    featurizer: Featurizer,
    epochs: int = 3,
    opt: Optimizer | None = None,
    batch_size: int | None = 32,
    rng: np.random.Generator | None = None,
) -> tuple[MlpNet, list[float]]:
    """Fit ``policy`` to expert actions by minimizing their mean negative log-likelihood.

    Observations only ever enter through the features; the targets are the
    expert action ids.  ``batch_size=None`` runs full-batch steps.  Returns the
    policy (updated in place) and the full-dataset NLL after each epoch.
    """
    if not expert_set:
        raise UsageError("behavior_clone() needs at least one expert trajectory")
    if any(t.reward != 1.0 for t in expert_set):
        raise UsageError("expert trajectories must all be successful")
    X, y = _bc_arrays(expert_set, featurizer)
    n = len(y)
    bs = n if batch_size is None else min(batch_size, n)
    if opt is None:
        steps = epochs * -(-n // bs)
        opt = Optimizer("adamw", 3e-3, weight_decay=0.01, schedule="cosine", total_steps=max(steps, 1))
    rng = rng if rng is not None else np.random.default_rng(0)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            logits = policy.forward(X[idx])
            grad = softmax(logits)
            grad[np.arange(len(idx)), y[idx]] -= 1.0
            grads, _ = policy.backward(grad / len(idx))
            opt.step(policy, grads)
        losses.append(nll(policy, X, y))
    return policy, losses
