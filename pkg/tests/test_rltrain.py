from __future__ import annotations

import numpy as np
import pytest

from stepcredit.errors import ConfigError, UsageError
from stepcredit.rltrain import (
    PpoConfig,
    RolloutBatch,
    clipped_surrogate,
    compute_gae,
    discounted_returns,
    ppo_policy_loss,
    ppo_update,
    trajectory_weights,
    vanishing_advantage_report,
    weighted_logprob_loss,
)
from stepcredit.tinynn import MlpNet, Optimizer, log_softmax, softmax

from oracles import brute_force_gae


def test_gae_examples():
    a = compute_gae([0, 0, 1], [0, 0, 0], gamma=1.0, lam=1.0)
    assert a.advantages.tolist() == [1.0, 1.0, 1.0]
    b = compute_gae([0, 0, 1], [0, 0, 0], gamma=0.5, lam=0.5)
    assert b.deltas.tolist() == [0.0, 0.0, 1.0]
    assert b.advantages.tolist() == [0.0625, 0.25, 1.0]
    with pytest.raises(UsageError):
        compute_gae([0, 1], [0])


def test_gae_matches_brute_force_double_sum():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        r, v = rng.normal(size=n), rng.normal(size=n)
        boot, gamma, lam = float(rng.normal()), float(rng.uniform(0.5, 1)), float(rng.uniform(0, 1))
        got = compute_gae(r, v, boot, gamma, lam)
        np.testing.assert_allclose(got.advantages, brute_force_gae(r, v, boot, gamma, lam), rtol=0, atol=1e-10)
        np.testing.assert_allclose(got.value_targets, got.advantages + v, rtol=0, atol=1e-15)


def test_vanishing_advantage_deterministic_reward_gives_zero():
    rows = vanishing_advantage_report(20, 0.99, 0.95, 1.0, 1.0)
    assert all(row["delta"] == 0.0 and row["advantage"] == 0.0 for row in rows)


def test_vanishing_advantage_first_step():
    rows = vanishing_advantage_report(20, 0.99, 0.95, 0.5, 1.0)
    assert abs(rows[0]["advantage"] - 0.9405**18 * 0.5) <= 1e-12
    assert all(row["delta"] == 0.0 for row in rows[:-1])
    for row in rows:
        assert row["advantage"] == pytest.approx(row["closed_form"], abs=1e-15)
    two = vanishing_advantage_report(2, 0.99, 0.95, 0.3, 1.0)
    assert len(two) == 1 and two[0]["advantage"] == pytest.approx(0.7, abs=1e-15) == two[0]["delta"]
    with pytest.raises(UsageError):
        vanishing_advantage_report(1, 0.99, 0.95, 0.5)


def test_advantage_magnitude_shrinks_toward_the_start():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        rows = vanishing_advantage_report(n, float(rng.uniform(0.5, 1)), float(rng.uniform(0, 0.99)), float(rng.uniform()), float(rng.uniform()))
        mags = [abs(row["advantage"]) for row in rows]
        assert all(a <= b for a, b in zip(mags, mags[1:]))


def test_clipped_surrogate():
    assert clipped_surrogate(np.array([1.3]), np.array([1.0]), 0.2)[0] == pytest.approx(1.2)
    rng = np.random.default_rng(2)
    ratio, adv = np.exp(rng.normal(size=1000)), rng.normal(size=1000)
    assert np.all(clipped_surrogate(ratio, adv, 0.2) <= ratio * adv)


def _policy_batch(seed):
    rng = np.random.default_rng(seed)
    net = MlpNet([4, 8, 3], rng=rng)
    X = rng.normal(size=(20, 4))
    actions = rng.integers(3, size=20)
    adv = rng.normal(size=20)
    return net, X, actions, adv


def test_ratio_one_equals_vanilla_policy_gradient():
    net, X, actions, adv = _policy_batch(3)
    logp = log_softmax(net.forward(X))[np.arange(20), actions]
    loss, grads, stats = ppo_policy_loss(net, X, actions, logp, adv, 0.2, 0.0)
    assert loss == pytest.approx(-adv.mean(), abs=1e-12) and stats["clip_frac"] == 0.0
    _, pg = weighted_logprob_loss(net, X, actions, adv)
    for a, b in zip(grads, pg):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_policy_loss_gradient_matches_finite_differences():
    net, X, actions, adv = _policy_batch(4)
    old = log_softmax(net.forward(X))[np.arange(20), actions] + np.random.default_rng(5).normal(scale=0.1, size=20)
    _, grads, _ = ppo_policy_loss(net, X, actions, old, adv, 0.2, 0.01)
    h = 1e-6
    for p, g in zip(net.params(), grads):
        flat, gf = p.reshape(-1), g.reshape(-1)
        for i in range(0, flat.size, 3):
            keep = flat[i]
            flat[i] = keep + h
            up = ppo_policy_loss(net, X, actions, old, adv, 0.2, 0.01)[0]
            flat[i] = keep - h
            down = ppo_policy_loss(net, X, actions, old, adv, 0.2, 0.01)[0]
            flat[i] = keep
            assert gf[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)


def _bandit_batch(policy, rng, n=32):
    probs = softmax(policy.forward(np.ones((n, 1))))
    actions = np.array([rng.choice(2, p=p) for p in probs])
    logp = np.log(probs[np.arange(n), actions])
    return RolloutBatch(
        X=np.ones((n, 1)), actions=actions, old_logp=logp,
        rewards=[np.array([float(a == 0)]) for a in actions], lengths=np.ones(n, dtype=int),
    )


def test_ppo_solves_two_armed_bandit():
    rng = np.random.default_rng(6)
    policy, value = MlpNet([1, 2], zero_init=True), MlpNet([1, 1], zero_init=True)
    popt, vopt = Optimizer("adam", 0.05), Optimizer("adam", 0.05)
    cfg = PpoConfig()
    for _ in range(50):
        ppo_update(policy, value, _bandit_batch(policy, rng), cfg, popt, vopt, rng)
    assert softmax(policy.forward(np.ones(1)))[0] > 0.95


def test_ppo_aborts_on_nan_reward():
    rng = np.random.default_rng(7)
    policy, value = MlpNet([1, 2], zero_init=True), MlpNet([1, 1], zero_init=True)
    batch = _bandit_batch(policy, rng, 4)
    batch.rewards[0][0] = np.nan
    cfg = PpoConfig(normalize_advantages=False)
    with pytest.raises(FloatingPointError, match="episodes"):
        ppo_update(policy, value, batch, cfg, Optimizer(), Optimizer(), rng)


def test_config_validation():
    with pytest.raises(ConfigError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        PpoConfig(clip_eps=0.0)
    assert PpoConfig().as_dict()["minibatch_size"] == 256


def test_trajectory_weights():
    assert trajectory_weights([1.0, 0.0], [0, 0], "rloo").tolist() == [1.0, -1.0]
    w = trajectory_weights([1.0, 0.0, 1.0, 0.0], [0, 0, 0, 0], "grpo_style")
    np.testing.assert_allclose(w, np.array([1, -1, 1, -1]) * 0.5 / (0.5 + 1e-8), rtol=1e-15)
    for kind in ("rloo", "grpo_style"):
        assert np.all(trajectory_weights([0.7, 0.7, 0.7], [1, 1, 1], kind) == 0.0)
        with pytest.raises(UsageError):
            trajectory_weights([1.0, 0.0, 1.0], [0, 0, 1], kind)
    assert trajectory_weights([0.2, 1.0], [0, 1], "reinforce").tolist() == [0.2, 1.0]
    with pytest.raises(UsageError):
        trajectory_weights([1.0], [0], "ppo")


def test_discounted_returns():
    assert discounted_returns([0, 0, 1], 0.5).tolist() == [0.25, 0.5, 1.0]


def test_rloo_matches_leave_one_out_definition():
    rng = np.random.default_rng(8)
    R = rng.uniform(size=24)
    groups = np.repeat(np.arange(4), 6)
    w = trajectory_weights(R, groups, "rloo")
    for j in range(24):
        others = [R[i] for i in range(24) if groups[i] == groups[j] and i != j]
        assert w[j] == pytest.approx(R[j] - np.mean(others), abs=1e-14)
