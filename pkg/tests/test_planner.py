from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repgame.envs import EnvSpec, gen_tabular
from repgame.equilibrium import DEFAULT_EPS
from repgame.game import exploitability, value_of_policy
from repgame.planner import (
    BonusParams,
    Covariance,
    ScheduleContext,
    StageSolver,
    bonus,
    factored_bonus,
    gap,
    lsvi_plan,
    mb_plan,
)
from repgame.replearn import Dataset, one_hot_features


def test_isotropic_bonus_equals_alpha():
    cov = Covariance(4, 1.0)
    x = np.array([[0.6, 0.8, 0.0, 0.0]])
    assert bonus(x, cov, 0.7, 3)[0] == pytest.approx(0.7)
    assert bonus(x, cov, 1e9, 3)[0] == 3.0


@pytest.mark.parametrize("n", [0, 1, 3, 8])
def test_repeated_update_bonus(n):
    cov = Covariance(3, 1.0)
    x = np.array([0.0, 1.0, 0.0])
    for _ in range(n):
        cov.update(x)
    assert bonus(x[None], cov, 0.5, 10)[0] == pytest.approx(0.5 / math.sqrt(n + 1), rel=1e-12)
    np.testing.assert_allclose(cov.inverse, np.linalg.inv(cov.matrix), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bonus_monotone_under_enlargement(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(10, 4))
    cov = Covariance.from_features(X, 0.5)
    probe = rng.normal(size=(20, 4))
    before = bonus(probe, cov, 1.0, 100)
    cov.update(rng.normal(size=4))
    assert np.all(bonus(probe, cov, 1.0, 100) <= before + 1e-12)


def test_gap_examples():
    assert gap(np.zeros(2), np.zeros(2), 0.0, 3, 9).delta == 0.0
    g = gap(np.array([0.5, 0.4]), np.array([0.2, 0.3]), 0.01, 3, 9)
    assert g.spread == pytest.approx(0.3)
    assert g.delta == pytest.approx(2.1)
    # Factored slack scales with the player count and the per-player action count.
    gf = gap(np.zeros(3), np.zeros(3), 0.01, 3, 2, "factored", n_players=3)
    assert gf.slack == pytest.approx(2 * 3 * 3 * math.sqrt(2 * 0.01))


def test_schedules():
    ctx = ScheduleContext("mb", H=3, d=27, A=9, M=2, A_tilde=3, class_size=10, N=200)
    const = BonusParams()
    assert const.alpha(5, ctx) == 0.1 and const.zeta(4, ctx) == 0.25
    theory = BonusParams(mode="theory", c_alpha=2.0)
    log = math.log(10 * 3 * 200 / 0.1)
    assert theory.alpha(1, ctx) == pytest.approx(2.0 * 3 * 27 * math.sqrt(9 * log))
    assert theory.zeta(10, ctx) == pytest.approx(log / 10)


def test_factored_bonus_reductions():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 4))
    cov = Covariance.from_features(rng.normal(size=(7, 4)), 1.0)
    np.testing.assert_allclose(factored_bonus([X], [cov], 0.3, 3), bonus(X, cov, 0.3, 3))
    unit = np.eye(4)[:2]
    covs = [Covariance(4, 4.0) for _ in range(3)]
    np.testing.assert_allclose(factored_bonus([unit] * 3, covs, 0.8, 3), 3 * min(0.8 / 2.0, 3))


def test_factored_bonus_ring_heterogeneous_counts():
    rng = np.random.default_rng(1)
    d = 4
    data = [np.eye(d)[rng.integers(d, size=n)] for n in (3, 10, 40)]
    covs = [Covariance(d, 1.0) for _ in range(3)]
    for X, c in zip(data, covs):
        for x in X:
            c.update(x)
    probe = [np.eye(d)[rng.integers(d, size=6)] for _ in range(3)]
    expected = np.zeros(6)
    for X, P in zip(data, probe):
        counts = X.sum(axis=0)
        # One-hot rows: ||e_j||_{Sigma^-1} = 1 / sqrt(count_j + lam).
        expected += np.minimum(0.5 / np.sqrt(counts[P.argmax(1)] + 1.0), 3)
    np.testing.assert_allclose(factored_bonus(probe, covs, 0.5, 3), expected, atol=1e-12)


def latent_plan_inputs(g, beta):
    H = g.horizon
    return ([g.transitions[h] for h in range(H)], [g.rewards[h] for h in range(H)],
            [np.full((g.n_states, g.n_joint), beta) for _ in range(H)])


def test_mb_plan_on_truth_without_bonus():
    g = gen_tabular(EnvSpec(family="tabular", seed=3))
    P, r, b = latent_plan_inputs(g, 0.0)
    res = mb_plan(P, r, b, g.init_dist, g.action_sizes, "cce")
    tables = res.extra["tables"]
    v = value_of_policy(g, tables).v
    np.testing.assert_allclose(res.vbar, v, atol=1e-12)
    np.testing.assert_allclose(res.vlow, v, atol=1e-12)
    assert exploitability(g, tables) <= g.horizon * DEFAULT_EPS


def test_mb_plan_constant_bonus_shift():
    g = gen_tabular(EnvSpec(family="tabular", seed=4))
    H = g.horizon
    base = mb_plan(*latent_plan_inputs(g, 0.0), g.init_dist, g.action_sizes, "cce")
    shifted = mb_plan(*latent_plan_inputs(g, float(H)), g.init_dist, g.action_sizes, "cce")
    np.testing.assert_allclose(shifted.vbar - shifted.vlow, 2 * H * H, atol=1e-9)
    for a, b in zip(base.extra["tables"], shifted.extra["tables"]):
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_mb_plan_zero_sum_one_step():
    a, b_, c, d = 0.8, -0.4, -0.6, 0.2
    U = np.array([[a, b_], [c, d]])
    value = (a * d - b_ * c) / (a + d - b_ - c)
    beta = 0.1
    r = np.stack([U.reshape(1, 4), -U.reshape(1, 4)])
    res = mb_plan([np.ones((1, 4, 1))], [r], [np.full((1, 4), beta)], np.ones(1), (2, 2), "ne")
    assert res.vbar[0] == pytest.approx(value + beta, abs=1e-9)
    assert res.vbar[1] == pytest.approx(-value + beta, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mb_plan_sandwich(seed):
    rng = np.random.default_rng(seed)
    g = gen_tabular(EnvSpec(family="tabular", H=2, Z=2, actions=2, seed=seed))
    P = [g.transitions[h] * rng.uniform(0.7, 1.0, size=(2, 4, 1)) for h in range(2)]
    b = [rng.uniform(0, 2, size=(2, 4)) for _ in range(2)]
    res = mb_plan(P, [g.rewards[h] for h in range(2)], b, g.init_dist, g.action_sizes, "cce")
    assert res.sandwich_violations(2 * 1e-3 * 2) == 0


def test_stage_solver_cache():
    solver = StageSolver((2, 2), "cce")
    q = np.random.default_rng(0).uniform(-1, 1, size=(2, 4))
    a, b = solver(q), solver(q.copy())
    assert solver.calls == 1
    np.testing.assert_array_equal(a, b)


def chain_features(obs, actions):
    return one_hot_features(np.asarray(obs), np.asarray(actions), 2, 2)


def chain_reward(h, obs):
    # One player, two actions; action 1 pays 0.5 in state 1 only.
    return np.array([[0.0, 0.5 if obs == 1 else 0.1]])


def test_lsvi_one_player_chain_matches_normal_equations():
    ds = Dataset(2)
    ds.main[0] = [(0, 0, 1), (0, 1, 0), (1, 1, 1), (1, 0, 0), (0, 0, 1), (1, 1, 1)]
    ds.main[1] = [(1, 0, 0), (0, 1, 1)]
    ds.tilde = [[], []]
    lam, alpha = 1.0, 0.2
    res = lsvi_plan([chain_features] * 2, ds, chain_reward, alpha, lam, (2,), "cce", init_obs=[0, 1])
    planner = res.extra["planner"]

    def vbar_last(s):
        X = chain_features([s, s], [0, 1])
        Xm = chain_features([1, 0], [0, 1])
        Sinv = np.linalg.inv(Xm.T @ Xm + lam * np.eye(4))
        b = np.minimum(alpha * np.sqrt(np.einsum("nd,de,ne->n", X, Sinv, X)), 2)
        return (chain_reward(1, s)[0] + b).max()

    X0 = chain_features([t[0] for t in ds.main[0]], [t[1] for t in ds.main[0]])
    y = np.array([vbar_last(t[2]) for t in ds.main[0]])
    theta = np.linalg.solve(X0.T @ X0 + lam * np.eye(4), X0.T @ y)
    np.testing.assert_allclose(planner.steps[0].theta_bar[:, 0], theta, atol=1e-12)
    np.testing.assert_array_equal(planner.steps[1].theta_bar, 0.0)
    Qb, _ = planner.q_values(0, 0)
    X = chain_features([0, 0], [0, 1])
    Sinv = np.linalg.inv(X0.T @ X0 + lam * np.eye(4))
    b = np.minimum(alpha * np.sqrt(np.einsum("nd,de,ne->n", X, Sinv, X)), 2)
    np.testing.assert_allclose(Qb[0], chain_reward(0, 0)[0] + X @ theta + b, atol=1e-12)


def test_lsvi_huge_lambda_kills_weights():
    ds = Dataset(2)
    ds.main[0] = [(0, 0, 1), (1, 1, 0)]
    ds.main[1] = [(1, 0, 0), (0, 1, 1)]
    ds.tilde = [[(0, 1, 1)], [(1, 1, 0)]]
    res = lsvi_plan([chain_features] * 2, ds, chain_reward, 0.3, 1e12, (2,), "cce")
    planner = res.extra["planner"]
    for step in planner.steps:
        assert np.abs(step.theta_bar).max() < 1e-9
    Qb, Ql = planner.q_values(0, 1)
    b = 0.3 / math.sqrt(1e12)
    np.testing.assert_allclose(Qb[0], chain_reward(0, 1)[0] + b, atol=1e-9)
    np.testing.assert_allclose(Ql[0], chain_reward(0, 1)[0] - b, atol=1e-9)
    assert res.extra["simplex_violations"] == 0
    assert res.sandwich_violations(1e-9) == 0
