"""Exact checks of the identities the method rests on.

* ``TreeMDP`` is a small episodic MDP whose trajectories can be enumerated, so
  expected policy gradients are computed as exact weighted sums.
* ``gradient_suite`` compares every hand-written gradient in the package with
  central finite differences.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .agentcore import Featurizer
from .credit import ProgressEstimator
from .envsim import Trajectory, make_env
from .tinynn import MlpNet, log_softmax, softmax


@dataclass
class TreeMDP:
    """Fixed-horizon MDP over interaction histories.

    After each action one of ``num_obs`` observations arrives with a
    probability that depends on the history so far and the action.  The
    terminal reward depends on the whole history.  The policy is tabular:
    one logit vector per decision history.
    """

    horizon: int
    num_actions: int
    num_obs: int
    obs_probs: dict  # (history, action) -> probabilities over observations
    terminal_reward: dict  # full history -> reward in [0, 1]
    nodes: list  # decision histories in a fixed order

    @classmethod
    def random(cls, rng: np.random.Generator, horizon: int = 3, num_actions: int = 3, num_obs: int = 2) -> TreeMDP:
        nodes, obs_probs, terminal = [], {}, {}
        frontier = [()]
        for _ in range(horizon):
            nxt = []
            for hist in frontier:
                nodes.append(hist)
                for a in range(num_actions):
                    obs_probs[(hist, a)] = rng.dirichlet(np.ones(num_obs))
                    nxt.extend(hist + ((a, o),) for o in range(num_obs))
            frontier = nxt
        for hist in frontier:
            terminal[hist] = float(rng.uniform())
        return cls(horizon, num_actions, num_obs, obs_probs, terminal, nodes)

    @property
    def node_index(self) -> dict:
        return {h: i for i, h in enumerate(self.nodes)}

    def trajectories(self):
        """Yield ``(history, probability factor from the environment)`` for every full history."""
        steps = [(a, o) for a in range(self.num_actions) for o in range(self.num_obs)]
        for seq in itertools.product(steps, repeat=self.horizon):
            p = 1.0
            for t, (a, o) in enumerate(seq):
                p *= self.obs_probs[(seq[:t], a)][o]
            yield seq, p


def exact_policy_gradient(mdp: TreeMDP, logits: np.ndarray, reward_fn) -> np.ndarray:
    """Exact ``E[sum_t grad log pi(a_t | e_{t-1}) G_t]`` with ``G_t = sum_{k>=t} r_k``.

    ``logits`` has one row per decision node; ``reward_fn(history)`` returns the
    per-step rewards of a full history.
    """
    index = mdp.node_index
    probs = softmax(logits)
    grad = np.zeros_like(logits)
    for hist, p_env in mdp.trajectories():
        p = p_env
        for t, (a, _) in enumerate(hist):
            p *= probs[index[hist[:t]], a]
        rewards = np.asarray(reward_fn(hist), dtype=np.float64)
        returns = np.cumsum(rewards[::-1])[::-1]
        for t, (a, _) in enumerate(hist):
            i = index[hist[:t]]
            score = -probs[i].copy()
            score[a] += 1.0
            grad[i] += p * returns[t] * score
    return grad


def potential_rewards(potential: dict, hist) -> list[float]:
    """Step rewards ``phi(e_t) - phi(e_{t-1})`` with ``phi`` of the empty history fixed at 0."""
    phis = [0.0] + [potential[hist[: t + 1]] for t in range(len(hist))]
    return [phis[t + 1] - phis[t] for t in range(len(hist))]


def random_potential(mdp: TreeMDP, rng: np.random.Generator, terminal_matches_reward: bool = True) -> dict:
    """Arbitrary potentials on partial histories.

    With ``terminal_matches_reward`` the potential of each full history equals
    its terminal reward, i.e. the estimator sits at the optimum of its loss.
    """
    potential = {}
    for node in mdp.nodes[1:]:
        potential[node] = float(rng.normal())
    for hist in mdp.terminal_reward:
        potential[hist] = mdp.terminal_reward[hist] if terminal_matches_reward else float(rng.normal())
    return potential


def policy_gradient_invariance(mdp: TreeMDP, logits: np.ndarray, potential: dict) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients with potential-difference rewards and with the sparse terminal reward.

    The sparse reward used is the final potential, which coincides with the
    environment's terminal reward when the potentials are fitted.
    """
    dense = exact_policy_gradient(mdp, logits, lambda h: potential_rewards(potential, h))

    def sparse(h):
        r = [0.0] * len(h)
        r[-1] = potential[h]
        return r

    return dense, exact_policy_gradient(mdp, logits, sparse)


# --------------------------------------------------------------------------
# finite-difference gradient checks


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a| + |n|, floor)``; the floor keeps near-zero entries from dividing round-off by round-off."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def _fd_grads(net: MlpNet, loss_fn, h: float) -> list[np.ndarray]:
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def _relu_margin_ok(net: MlpNet, X: np.ndarray, margin: float) -> bool:
    if net.activation != "relu":
        return True
    h = X
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ w + b
        if np.min(np.abs(z)) <= margin:
            return False
        h = np.maximum(z, 0.0)
    return True


@dataclass
class GradCheckResult:
    network: str
    configs: int
    max_rel_error: float
    worst_config: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _check(net: MlpNet, analytic_fn, loss_fn, h: float) -> float:
    analytic = analytic_fn()
    numeric = _fd_grads(net, loss_fn, h)
    return max(float(rel_error(a, n).max()) for a, n in zip(analytic, numeric))


def check_policy(rng: np.random.Generator, h: float = 1e-5, activation: str = "tanh", margin: float = 1e-3) -> float:
    """Gradient of the mean NLL of random actions through an (F, 32, A) net."""
    while True:
        F, A, B = int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        net = MlpNet([F, 32, A], activation, rng)
        for b in net.biases:
            b[...] = rng.normal(scale=0.3, size=b.shape)
        X = rng.normal(size=(B, F))
        if _relu_margin_ok(net, X, margin):
            break
    y = rng.integers(A, size=B)

    def loss():
        return float(-log_softmax(net.forward(X))[np.arange(B), y].mean())

    def analytic():
        g = softmax(net.forward(X))
        g[np.arange(B), y] -= 1.0
        return net.backward(g / B)[0]

    return _check(net, analytic, loss, h)


def check_value(rng: np.random.Generator, h: float = 1e-5, activation: str = "tanh", margin: float = 1e-3) -> float:
    """Gradient of a squared-error regression loss through an (F, 64, 64, 1) net."""
    while True:
        F, B = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        net = MlpNet([F, 64, 64, 1], activation, rng)
        for b in net.biases:
            b[...] = rng.normal(scale=0.3, size=b.shape)
        X = rng.normal(size=(B, F))
        if _relu_margin_ok(net, X, margin):
            break
    target = rng.normal(size=B)

    def loss():
        return float(np.mean((net.forward(X)[:, 0] - target) ** 2))

    def analytic():
        diff = net.forward(X)[:, 0] - target
        return net.backward((2.0 * diff / B)[:, None])[0]

    return _check(net, analytic, loss, h)


def random_trajectories(env, rng: np.random.Generator, count: int, max_len: int) -> list[Trajectory]:
    """Random-action episodes on random tasks, cut at a random length and given a random reward."""
    out = []
    for _ in range(count):
        task = env.task(int(rng.integers(env.num_tasks)))
        state, obs = env.reset(task, int(rng.integers(1 << 30)))
        traj = Trajectory(task, 0, obs)
        n = int(rng.integers(1, max_len + 1))
        while len(traj) < n and not state.done:
            a = int(rng.integers(env.action_space.count))
            state, res = env.step(state, a)
            traj.append(a, res)
        traj.reward = float(rng.uniform())
        out.append(traj)
    return out


def check_estimator(rng: np.random.Generator, mode: str, h: float = 1e-5) -> float:
    """Gradient of the sum-of-contributions squared error through the whole unrolled sum."""
    env = make_env("chaincraft")
    fz = Featurizer(env, history_k=1)
    hidden = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    est = ProgressEstimator(fz, mode, hidden=hidden, rng=rng)
    for b in est.net.biases:
        b[...] = rng.normal(scale=0.3, size=b.shape)
    trajs = random_trajectories(env, rng, int(rng.integers(1, 4)), 6)

    def loss():
        return est.loss_and_grads(trajs)[0]

    def analytic():
        return est.loss_and_grads(trajs)[1]

    return _check(est.net, analytic, loss, h)


def gradient_suite(configs: int = 64, seed: int = 0, h: float = 1e-5) -> list[GradCheckResult]:
    checks = {
        "policy": lambda r: check_policy(r, h),
        "policy_relu": lambda r: check_policy(r, h, "relu"),
        "value": lambda r: check_value(r, h),
        "value_relu": lambda r: check_value(r, h, "relu"),
        "estimator_direct": lambda r: check_estimator(r, "direct", h),
        "estimator_potential": lambda r: check_estimator(r, "potential", h),
    }
    results = []
    for k, (name, fn) in enumerate(checks.items()):
        errs = [fn(np.random.default_rng([seed, k, i])) for i in range(configs)]
        worst = int(np.argmax(errs))
        results.append(GradCheckResult(name, configs, float(errs[worst]), worst))
    return results


# --------------------------------------------------------------------------
# synthetic credit data


def designated_action_dataset(
    env, rng: np.random.Generator, count: int, designated: int = 12, min_len: int = 5, max_len: int = 20
) -> list[Trajectory]:
    """Episodes whose reward is the fraction of steps that took ``designated``.

    Each episode draws its own propensity ``p ~ U[0, 1]`` and at every step
    takes ``designated`` with probability ``p``, otherwise a uniform action, so
    rewards cover the whole unit interval.  The generating rule is the oracle:
    the designated action is worth ``1/n`` per use and every other action 0.
    """
    out = []
    for _ in range(count):
        task = env.task(int(rng.integers(env.num_tasks)))
        state, obs = env.reset(task, int(rng.integers(1 << 30)))
        traj = Trajectory(task, 0, obs)
        p = rng.uniform()
        n = int(rng.integers(min_len, max_len + 1))
        while len(traj) < n and not state.done:
            a = designated if rng.uniform() < p else int(rng.integers(env.action_space.count))
            state, res = env.step(state, a)
            traj.append(a, res)
        traj.reward = sum(a == designated for a in traj.actions) / len(traj)
        out.append(traj)
    return out
