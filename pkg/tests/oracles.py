"""Independent reference computations shared by the unit and acceptance tests.

Each oracle re-derives a quantity from its definition by brute force and
touches the package only through the environment rules and the network's
forward pass.
"""
from __future__ import annotations

import numpy as np

from stepcredit.agentcore import Featurizer, make_policy
from stepcredit.envsim import Trajectory, make_env
from stepcredit.tinynn import softmax


def brute_force_gae(r, v, bootstrap, gamma, lam):
    """O(n^2) double sum: A_t = sum_k (gamma lam)^k delta_{t+k}."""
    n = len(r)
    vv = list(v) + [bootstrap]
    delta = [r[t] + gamma * vv[t + 1] - vv[t] for t in range(n)]
    return [sum((gamma * lam) ** k * delta[t + k] for k in range(n - t)) for t in range(n)]


def two_step_setup():
    """ChainCraft cut to 2 steps, and a small policy leaning toward the useful actions."""
    env = make_env("chaincraft", num_subtasks=3, num_distractors=0, horizon=2)
    fz = Featurizer(env, 2)
    policy = make_policy(fz, (8,), np.random.default_rng(11))
    task = env.task(4)
    first = task.goal_spec[0][0]
    # keeps the exact values well away from 0
    policy.biases[-1][[first, 6 + first]] += 4.0
    return env, fz, policy, task


def exact_value(env, fz, policy, state, history):
    """Expected terminal reward of the continuation, summed over every action sequence."""
    if state.done:
        return history.reward
    probs = softmax(policy.forward(fz.featurize(history)))
    total = 0.0
    for a, p in enumerate(probs):
        nxt, res = env.step(state, a)
        h = history.prefix(len(history))
        h.append(a, res)
        total += p * exact_value(env, fz, policy, nxt, h)
    return total


def recorded_episode(env, task, seed, actions):
    """The trajectory of a fixed action sequence plus the state before every step."""
    state, obs = env.reset(task, seed)
    t = Trajectory(task, seed, obs)
    states = [state]
    for a in actions:
        state, res = env.step(state, a)
        t.append(a, res)
        states.append(state)
    return t, states
