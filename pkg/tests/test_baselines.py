import numpy as np
import pytest

from aigc_alloc import baselines as bl
from aigc_alloc import tensor_nn as nn
from aigc_alloc.critic_trainer import TrainConfig
from aigc_alloc.errors import CapacityError, ConfigError
from aigc_alloc.scenario import (Decision, Scenario, default_sampler, encode_state, evaluate,
                                 sample_scenario, unconstrained)


def tight_pair(**kw):
    base = dict(num_users=2, bandwidth_budget=15.0, compute_budget=1e6, qoe_threshold=(0.5, 0.5))
    base.update(kw)
    return Scenario(**base)


def tiny_config(**kw):
    base = dict(sampler=default_sampler(2), total_steps=96, batch_size=16, capacity=500,
                warmup_steps=32, eval_every=32, eval_episodes=8, actor_hidden=(16,),
                critic_hidden=(16,), ppo_rollout=32, ppo_minibatch=16, ppo_epochs=2)
    base.update(kw)
    return TrainConfig(**base)


# -- oracle -------------------------------------------------------------------

def test_oracle_single_unconstrained_user():
    res = bl.oracle_grid_search(unconstrained(1))
    assert res.decision.resolution_ratio.tolist() == [1.0]
    assert res.decision.diffusion_step.tolist() == [10]
    assert res.total_qoe == pytest.approx(1.0)
    assert res.n_evaluated == 100


def test_oracle_tight_pair():
    res = bl.oracle_grid_search(tight_pair())
    assert res.total_qoe == pytest.approx(1.75, abs=1e-12)
    assert res.ties > 1
    np.testing.assert_allclose(res.decision.resolution_ratio, [0.5, 1.0])
    assert res.decision.diffusion_step.tolist() == [10, 10]


def test_oracle_forced_compute_corner():
    sc = tight_pair(compute_budget=2.0, qoe_threshold=(0.0, 0.0))
    res = bl.oracle_grid_search(sc)
    assert res.decision.diffusion_step.tolist() == [1, 1]
    assert res.decision.resolution_ratio.sum() == pytest.approx(1.5)
    assert evaluate(sc, res.decision).bandwidth_feasible


def test_oracle_capacity_bound():
    sc = unconstrained(5)
    with pytest.raises(CapacityError, match="10000000"):
        bl.oracle_grid_search(sc)


def test_oracle_invariants_and_thread_independence():
    rng = np.random.default_rng(0)
    for _ in range(5):
        sc = sample_scenario(rng, default_sampler(3))
        one = bl.oracle_grid_search(sc, threads=1)
        three = bl.oracle_grid_search(sc, threads=3)
        assert one.decision == three.decision and one.ties == three.ties
        rep = evaluate(sc, one.decision)
        assert rep.reward == one.reward
        assert rep.bandwidth_feasible and rep.compute_feasible


def test_oracle_r_levels_validated():
    with pytest.raises(ConfigError):
        bl.oracle_grid_search(unconstrained(1), r_levels=[0.05, 0.5])


def test_dp_oracle_matches_enumeration():
    rng = np.random.default_rng(1)
    for n in (2, 3):
        for _ in range(4):
            sc = sample_scenario(rng, default_sampler(n))
            assert bl.oracle_dp(sc).reward == pytest.approx(bl.oracle_grid_search(sc).reward,
                                                            abs=1e-9)


def test_oracle_dispatches_to_dp_for_large_n():
    sc = sample_scenario(np.random.default_rng(2), default_sampler(6))
    res = bl.oracle(sc)
    assert res.ties is None
    rep = evaluate(sc, res.decision)
    assert rep.bandwidth_feasible and rep.compute_feasible


def test_oracle_dominates_snapped_heuristics():
    rng = np.random.default_rng(3)
    for _ in range(20):
        sc = sample_scenario(rng, default_sampler(2))
        best = bl.oracle_grid_search(sc).reward
        for dec in (bl.greedy_allocate(sc), bl.random_policy(sc, rng)):
            assert evaluate(sc, bl.snap_to_grid(dec)).reward <= best + 1e-9


def test_snap_to_grid():
    dec = bl.snap_to_grid(Decision([0.75, 0.1, 1.0, 0.3], [3, 1, 10, 4]))
    np.testing.assert_allclose(dec.resolution_ratio, [0.7, 0.1, 1.0, 0.3])
    assert dec.diffusion_step.tolist() == [3, 1, 10, 4]


# -- greedy / random ------------------------------------------------------------

def test_greedy_unconstrained_matches_oracle():
    for n in (1, 2, 3):
        sc = unconstrained(n)
        g = bl.greedy_allocate(sc)
        assert g.resolution_ratio.tolist() == [1.0] * n
        assert g.diffusion_step.tolist() == [10] * n
        assert g == bl.oracle_grid_search(sc).decision


def test_greedy_tight_pair_scales_uniformly():
    g = bl.greedy_allocate(tight_pair())
    np.testing.assert_allclose(g.resolution_ratio, [0.75, 0.75])
    assert g.diffusion_step.tolist() == [10, 10]


def test_greedy_compute_one_step_each():
    g = bl.greedy_allocate(unconstrained(3, compute_budget=3.0))
    assert g.diffusion_step.tolist() == [1, 1, 1]


def test_random_policy_seeded_and_feasible():
    sc = tight_pair()
    a = bl.random_policy(sc, np.random.default_rng(5))
    b = bl.random_policy(sc, np.random.default_rng(5))
    assert a == b
    rng = np.random.default_rng(6)
    for _ in range(200):
        rep = evaluate(sc, bl.random_policy(sc, rng))
        assert rep.bandwidth_feasible and rep.compute_feasible


def test_random_policy_uniform_mean():
    rng = np.random.default_rng(7)
    sc = unconstrained(1)
    r = [bl.random_policy(sc, rng).resolution_ratio[0] for _ in range(10_000)]
    assert abs(np.mean(r) - 0.55) < 0.01


# -- SAC / PPO --------------------------------------------------------------------

def test_ppo_clip_bound():
    ratio = nn.Tensor(np.linspace(0.0, 3.0, 61))
    for sign in (1.0, -1.0):
        adv = np.full(61, sign * 2.0)
        obj = bl.ppo_clipped_objective(ratio, adv, 0.2).data
        contribution = obj / adv
        clipped = np.clip(ratio.data, 0.8, 1.2)
        # the clipped branch caps any gain at the trust region edge
        if sign > 0:
            assert np.all(contribution <= 1.2 + 1e-12)
            np.testing.assert_allclose(contribution, np.minimum(ratio.data, clipped))
        else:
            assert np.all(contribution >= 0.8 - 1e-12)
            np.testing.assert_allclose(contribution, np.maximum(ratio.data, clipped))


def test_sac_evaluation_ignores_std_head():
    rng = np.random.default_rng(0)
    net = nn.mlp_init([8, 16, 8], rng)
    policy = bl.BaselinePolicy("sac", 2, net)
    s = rng.uniform(size=(5, 8))
    before = policy.act(s)
    net.weights[-1][:, 4:] += 5.0
    net.biases[-1][4:] -= 3.0
    np.testing.assert_array_equal(policy.act(s), before)
    assert np.all(np.abs(before) <= 3.0)


def test_baseline_kind_consistency():
    net = nn.mlp_init([4, 4], np.random.default_rng(0))
    with pytest.raises(ConfigError):
        bl.BaselinePolicy("sac", 1)
    with pytest.raises(ConfigError):
        bl.BaselinePolicy("ppo", 1, net)
    with pytest.raises(ConfigError):
        bl.BaselinePolicy("dqn", 1)


def test_sac_log_prob_matches_change_of_variables():
    rng = np.random.default_rng(1)
    net = nn.mlp_init([3, 8, 4], rng)
    s = rng.uniform(size=(1, 3))
    noise = rng.normal(size=(1, 2))
    a, logp = bl.sac_sample(net, s, noise)
    out = nn.predict(net, s)[0]
    mu, log_std = out[:2], np.clip(out[2:], bl.LOG_STD_MIN, bl.LOG_STD_MAX)
    u = mu + np.exp(log_std) * noise[0]
    gauss = np.sum(-log_std - 0.5 * noise[0] ** 2 - 0.5 * np.log(2 * np.pi))
    expected = gauss - np.sum(np.log(3.0 * (1 - np.tanh(u) ** 2) + 1e-6))
    np.testing.assert_allclose(a.data[0], 3.0 * np.tanh(u))
    assert logp.data[0] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("fn", [bl.train_sac_lite, bl.train_ppo_lite])
def test_baseline_training_deterministic(fn):
    _, c1, _, _, r1 = fn(tiny_config(seed=4))
    _, c2, _, _, r2 = fn(tiny_config(seed=4))
    assert c1 == c2 and len(c1) == 3
    assert [r.reward for r in r1] == [r.reward for r in r2]


@pytest.mark.parametrize("fn", [bl.train_sac_lite, bl.train_ppo_lite])
def test_baseline_decisions_feasible(fn):
    _, _, _, _, reports = fn(tiny_config(seed=1))
    assert all(r.bandwidth_feasible and r.compute_feasible for r in reports)


def test_ppo_state_independent_std_unused_in_eval():
    policy, _, _, evals, _ = bl.train_ppo_lite(tiny_config())
    s = np.stack([encode_state(sc) for sc in evals])
    before = policy.act(s)
    policy.log_std.data += 2.0
    np.testing.assert_array_equal(policy.act(s), before)
