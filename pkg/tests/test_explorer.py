from __future__ import annotations

import numpy as np
import pytest

from stepcredit.agentcore import Featurizer, make_policy
from stepcredit.envsim import grounding_accuracy, make_env, replay
from stepcredit.errors import UsageError
from stepcredit.explorer import ExploreDataset, collect, dataset_stats, episode_seed


@pytest.fixture(scope="module")
def setup():
    env = make_env("chaincraft")
    fz = Featurizer(env, 4)
    policy = make_policy(fz, (16,), np.random.default_rng(0))
    tasks = [env.task(i) for i in range(20)]
    return env, fz, policy, tasks


def test_counts_and_seed_rule(setup):
    env, fz, policy, tasks = setup
    ds = collect(env, policy, fz, tasks, 10, 0.7, base_seed=100)
    assert len(ds) == 200 and len(ds.trajectories) == 200
    for i, group in enumerate(ds.groups):
        assert len(group) == 10
        for j, t in enumerate(group):
            assert t.task.task_id == tasks[i].task_id
            assert t.seed == 100 + i * 10 + j == episode_seed(100, i, j, 10)
    seeds = [t.seed for t in ds.trajectories]
    assert len(set(seeds)) == len(seeds)
    with pytest.raises(UsageError):
        collect(env, policy, fz, tasks, 0)


def test_collect_is_deterministic(setup):
    env, fz, policy, tasks = setup
    a = collect(env, policy, fz, tasks[:5], 4, 0.7, 3)
    b = collect(env, policy, fz, tasks[:5], 4, 0.7, 3)
    assert [t.to_record() for t in a.trajectories] == [t.to_record() for t in b.trajectories]


def test_replay_fidelity_after_save_and_load(setup, tmp_path):
    env, fz, policy, tasks = setup
    ds = collect(env, policy, fz, tasks[:8], 5, 0.7, 9)
    ds.save(tmp_path / "d.jsonl")
    back = ExploreDataset.load(tmp_path / "d.jsonl")
    assert back.header() == ds.header()
    assert [t.to_record() for t in back.trajectories] == [t.to_record() for t in ds.trajectories]
    for t in back.trajectories:
        _, again = replay(env, t)
        assert (again.observations, again.grounded, again.reward) == (t.observations, t.grounded, t.reward)
    # features are recomputed from the stored history, never stored
    assert "features" not in (tmp_path / "d.jsonl").read_text()


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(UsageError):
        ExploreDataset.load(tmp_path / "x.jsonl")


def test_stats(setup):
    env, fz, policy, tasks = setup
    ds = collect(env, policy, fz, tasks, 3, 1.0, 0)
    st = dataset_stats(ds)
    assert st.count == 60 == sum(st.reward_hist) == sum(st.length_hist.values())
    recount = [replay(env, t)[1] for t in ds.trajectories]
    assert st.grounding_rate == pytest.approx(np.mean([grounding_accuracy(t) for t in recount]), abs=1e-15)
    assert st.mean_reward == pytest.approx(np.mean([t.reward for t in recount]), abs=1e-15)


def test_all_failure_histogram_mass_at_zero(setup):
    env, fz, policy, tasks = setup
    ds = collect(env, policy, fz, tasks, 3, 1.0, 0)
    for t in ds.trajectories:
        t.reward = 0.0
    st = dataset_stats(ds)
    assert st.reward_hist[0] == st.count and st.success_rate == 0.0
    with pytest.raises(UsageError):
        dataset_stats(ExploreDataset("chaincraft", {}, 1, 1.0, 0, "x"))
