from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from stepcredit.agentcore import (
    Featurizer,
    action_accuracy,
    behavior_clone,
    make_policy,
    nll,
    rollout_tasks,
    run_episodes,
    sample_action,
    start_episode,
)
from stepcredit.envsim import Trajectory, expert_rollout, make_env
from stepcredit.errors import UsageError
from stepcredit.tinynn import MlpNet, Optimizer, softmax_logprob

BASELINES = json.loads((Path(__file__).parent / "baselines.json").read_text())


def fixed_logits_policy(logits, width):
    net = MlpNet([width, len(logits)], zero_init=True)
    net.biases[0][...] = logits
    return net


def chaincraft_bc(seed=0, n_train=200):
    """Behavior cloning exactly as the pipeline's bc stage configures it."""
    env = make_env("chaincraft")
    fz = Featurizer(env, 8)
    train = [expert_rollout(env, env.task(i), i) for i in range(n_train)]
    rng = np.random.default_rng(seed)
    policy = make_policy(fz, (64, 64), rng, "relu")
    n = sum(len(t) for t in train)
    opt = Optimizer("adamw", 1e-2, weight_decay=0.01, schedule="cosine", total_steps=3 * -(-n // 16))
    behavior_clone(policy, train, fz, 3, opt, 16, rng)
    return env, fz, policy


@pytest.fixture(scope="module")
def cloned():
    return chaincraft_bc()


def test_empty_history_features():
    env = make_env("chaincraft")
    fz = Featurizer(env, 4)
    _, obs = env.reset(env.task(0), 0)
    x = fz.featurize(Trajectory(env.task(0), 0, obs))
    assert x.shape == (fz.width,)
    assert np.all(x[fz.hist_offset:-1] == 0.0) and x[-1] == 0.0
    assert x[fz.init_offset + obs] == 1.0


def _traj(env, actions, seed=0):
    task = env.task(0)
    state, obs = env.reset(task, seed)
    t = Trajectory(task, seed, obs)
    for a in actions:
        state, res = env.step(state, a)
        t.append(a, res)
    return t


def test_truncation_and_sensitivity():
    env = make_env("chaincraft", num_distractors=6)
    fz = Featurizer(env, 2)
    tail = [12, 13]
    a = _traj(env, [14, 15, 16] + tail)
    b = _traj(env, [17, 14, 15] + tail)
    assert np.array_equal(fz.featurize(a), fz.featurize(b))
    c = _traj(env, [14, 15, 16, 17, 13])
    assert not np.array_equal(fz.featurize(a), fz.featurize(c))


def test_prefix_rows_match_featurize():
    env = make_env("chaincraft")
    t = expert_rollout(env, env.task(3), 3)
    fz = Featurizer(env, 3)
    X = fz.prefixes(t)
    for i in range(len(t)):
        assert np.array_equal(X[i], fz.featurize(t.prefix(i)))


def test_greedy_argmax_and_ties():
    p = fixed_logits_policy(np.array([2.0, 1.0, 0.0]), 3)
    assert sample_action(p, np.zeros(3), 0.0, np.random.default_rng(0)) == (0, 0.0)
    p = fixed_logits_policy(np.array([0.0, 1.0, 1.0]), 3)
    assert sample_action(p, np.zeros(3), 0.0, np.random.default_rng(0))[0] == 1
    with pytest.raises(UsageError):
        sample_action(p, np.zeros(3), -1.0, np.random.default_rng(0))


def test_equal_logits_sample_uniformly():
    p = fixed_logits_policy(np.zeros(4), 2)
    rng = np.random.default_rng(1)
    draws = np.array([sample_action(p, np.zeros(2), 0.7, rng)[0] for _ in range(10000)])
    counts = np.bincount(draws, minlength=4)
    sigma = np.sqrt(10000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) < 3 * sigma)


def test_high_temperature_approaches_uniform():
    p = fixed_logits_policy(np.array([3.0, 1.0, 0.0, -2.0]), 2)
    rng = np.random.default_rng(2)
    draws = np.array([sample_action(p, np.zeros(2), 100.0, rng)[0] for _ in range(10000)])
    freq = np.bincount(draws, minlength=4) / 10000
    kl = float(np.sum(freq * np.log(freq / 0.25)))
    assert kl < 0.01


def test_sampled_logprob_uses_tempered_distribution():
    logits = np.array([1.0, 0.5, -1.0])
    p = fixed_logits_policy(logits, 2)
    a, lp = sample_action(p, np.zeros(2), 0.7, np.random.default_rng(3))
    assert lp == pytest.approx(softmax_logprob(logits / 0.7, a)[0], abs=1e-12)


def test_single_pair_nll_is_negative_logprob():
    rng = np.random.default_rng(4)
    net = MlpNet([5, 8, 3], rng=rng)
    x = rng.normal(size=5)
    assert nll(net, x[None, :], np.array([2])) == pytest.approx(-softmax_logprob(net.forward(x), 2)[0], abs=1e-12)


def test_behavior_clone_rejects_bad_input():
    env = make_env("chaincraft")
    fz = Featurizer(env)
    with pytest.raises(UsageError):
        behavior_clone(make_policy(fz), [], fz)
    bad = _traj(env, [12])
    with pytest.raises(UsageError):
        behavior_clone(make_policy(fz), [bad], fz)


def test_full_batch_bc_loss_is_non_increasing():
    env = make_env("chaincraft")
    fz = Featurizer(env, 4)
    experts = [expert_rollout(env, env.task(i), i) for i in range(20)]
    policy = make_policy(fz, (32,), np.random.default_rng(5))
    _, losses = behavior_clone(policy, experts, fz, 30, Optimizer("adam", 1e-3), None)
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_bc_accuracy_on_held_out_prefixes(cloned):
    env, fz, policy = cloned
    held = [expert_rollout(env, env.task(i), 100_000 + i) for i in range(200)]
    acc = action_accuracy(policy, held, fz)
    assert acc == pytest.approx(BASELINES["bc_heldout_seed_accuracy"], abs=1e-12)
    assert acc >= 0.90


def test_bc_accuracy_on_unseen_tasks_is_recorded(cloned):
    env, fz, policy = cloned
    held = [expert_rollout(env, env.task(i), i) for i in range(5000, 5200)]
    assert action_accuracy(policy, held, fz) == pytest.approx(BASELINES["bc_unseen_task_accuracy"], abs=1e-12)


def test_base_policy_beats_random(cloned):
    env, fz, policy = cloned
    uniform = fixed_logits_policy(np.zeros(env.action_space.count), fz.width)
    tasks = [env.task(i) for i in range(100)]
    for seed in range(3):
        seeds = [seed * 1000 + i for i in range(100)]
        base = np.mean([t.reward == 1.0 for t in rollout_tasks(env, policy, fz, tasks, seeds, 1.0)])
        rand = np.mean([t.reward == 1.0 for t in rollout_tasks(env, uniform, fz, tasks, seeds, 1.0)])
        assert base > rand


def test_greedy_rollouts_are_deterministic(cloned):
    env, fz, policy = cloned
    tasks = [env.task(i) for i in range(10)]
    a = rollout_tasks(env, policy, fz, tasks, list(range(10)), 0.0)
    b = rollout_tasks(env, policy, fz, tasks, list(range(10)), 0.0)
    assert [t.to_record() for t in a] == [t.to_record() for t in b]


def test_batched_rollouts_do_not_depend_on_grouping(cloned):
    env, fz, policy = cloned
    pairs = [(env.task(i), 7 * i) for i in range(12)]
    together = run_episodes(env, policy, fz, [start_episode(env, t, s) for t, s in pairs], 0.7)
    alone = [run_episodes(env, policy, fz, [start_episode(env, t, s)], 0.7)[0] for t, s in pairs]
    for a, b in zip(together, alone):
        assert (a.actions, a.observations, a.grounded, a.reward) == (b.actions, b.observations, b.grounded, b.reward)
        # BLAS may sum a batched row in a different order than a lone one
        np.testing.assert_allclose(a.logprobs, b.logprobs, rtol=0, atol=1e-12)
        assert all(lp <= 0 for lp in a.logprobs)
