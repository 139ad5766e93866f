from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apexlab.errors import ConfigError, ContractViolation, DomainError, InvariantFailure
from apexlab.flowmatch import Context, FlowPolicyParams, NoiseSchedule, TimeGrid, sample_trajectory
from apexlab.scheduler import (
    GradientEstimates,
    PriorityFactors,
    SchedulerConfig,
    WeightState,
    check_weight_bounds,
    combine_factors,
    compute_weights,
    conflict_penalty,
    ema_update,
    estimate_objective_gradients,
    init_scheduler,
    learning_potential,
    pairwise_cosines,
    priorities_from_gradients,
    progress_need,
    scheduler_step,
    softmax,
)

GRID, SCHED = TimeGrid(10), NoiseSchedule(0.7)


def factors_from_psi(psi):
    psi = np.asarray(psi, dtype=float)
    one = np.ones_like(psi)
    return PriorityFactors(psi / 2, one, 2 * one, psi)


def microbatch(params, rewards, seed=0):
    rng = np.random.default_rng(seed)
    return [(sample_trajectory(params, Context(0), GRID, SCHED, rng, rng), r) for r in rewards]


def test_ema_hand_iteration():
    est = GradientEstimates.empty(1, 1, gamma=0.8)
    est = ema_update(est, [[1.0]])
    assert est.ema[0, 0] == 1.0  # first update copies
    seq = []
    for _ in range(3):
        est = ema_update(est, [[0.0]])
        seq.append(est.ema[0, 0])
    np.testing.assert_allclose(seq, [0.8, 0.64, 0.512])


def test_ema_gamma_zero_and_contraction():
    est = ema_update(GradientEstimates.empty(2, 3, gamma=0.0), np.ones((2, 3)))
    est = ema_update(est, np.full((2, 3), 5.0))
    assert np.array_equal(est.ema, np.full((2, 3), 5.0))
    est = ema_update(GradientEstimates.empty(1, 2, 0.8), [[10.0, -4.0]])
    g = np.array([[1.0, 2.0]])
    e0 = np.linalg.norm(est.ema - g)
    for n in range(1, 20):
        est = ema_update(est, g)
        assert np.linalg.norm(est.ema - g) <= 0.8 ** n * e0 + 1e-12


def test_ema_shape_mismatch():
    with pytest.raises(ContractViolation):
        ema_update(GradientEstimates.empty(2, 3), np.zeros((3, 3)))


def test_learning_potential_values():
    np.testing.assert_allclose(learning_potential(np.eye(4)), 0.25, atol=1e-8)
    lp = learning_potential([[3.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(lp, [0.75, 0.25], atol=1e-8)
    assert learning_potential([[0.0, 0.0], [1.0, 0.0]])[0] == 0.0
    assert np.array_equal(learning_potential(np.zeros((3, 2))), np.zeros(3))


def test_conflict_penalty_values():
    g = np.array([[1.0, 2.0], [-1.0, -2.0]])
    np.testing.assert_allclose(conflict_penalty(g), [0.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(conflict_penalty(np.eye(3)), [1.0, 1.0, 1.0])
    # cos(1,2) = -0.5, cos(1,3) = 0.9
    g1 = np.array([1.0, 0.0, 0.0])
    g2 = np.array([-0.5, np.sqrt(0.75), 0.0])
    g3 = np.array([0.9, 0.0, np.sqrt(1 - 0.81)])
    cp = conflict_penalty(np.stack([g1, g2, g3]))
    assert cp[0] == pytest.approx(0.75, abs=1e-7)


def test_pairwise_cosines_symmetric():
    g = np.random.default_rng(0).normal(size=(5, 30))
    c = pairwise_cosines(g)
    assert np.max(np.abs(c - c.T)) <= 1e-12


def test_progress_need_values():
    assert progress_need([0.5], [0.5])[0] == pytest.approx(1.0)
    assert progress_need([0.9], [0.5])[0] == 1.0
    assert progress_need([0.46], [0.92])[0] == pytest.approx(1.5, abs=1e-7)
    with pytest.raises(ConfigError):
        progress_need([0.1, 0.1], [0.5, 0.0])


def test_softmax_cases():
    np.testing.assert_allclose(softmax([0.7, 0.7, 0.7], 1.0), 1 / 3)
    w = softmax([2.0, 0.0], 1.0)
    np.testing.assert_allclose(w, [0.880797, 0.119203], atol=1e-6)
    assert w[0] / w[1] == pytest.approx(np.exp(2))


def test_weight_bound_checker_catches_violations():
    with pytest.raises(InvariantFailure):
        check_weight_bounds(np.array([0.99, 0.01]), None, 1.0)   # ratio 99 > e^2
    with pytest.raises(InvariantFailure):
        check_weight_bounds(np.array([0.6, 0.5]), None, 1.0)     # off simplex
    # at tau = 10 a step may move at most 2 (1 - exp(-0.2)) ~ 0.36 in L1
    check_weight_bounds(np.array([0.5, 0.5]), np.array([0.4, 0.6]), 10.0)
    with pytest.raises(InvariantFailure):
        check_weight_bounds(np.array([0.5, 0.5]), np.array([0.3, 0.7]), 10.0)


def test_compute_weights_records_history():
    st_ = WeightState.uniform(3)
    for k in range(5):
        st_ = compute_weights(factors_from_psi([0.1 * k, 0.2, 0.3]), 1.0, st_, k)
    assert len(st_.history) == 5
    assert st_.history[-1][0] == 4


def test_scale_invariance_of_lp_and_argmax():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(4, 10))
    r_bar, u = np.full(4, 0.3), np.full(4, 0.9)
    cfg = SchedulerConfig()
    f1 = priorities_from_gradients(g, r_bar, u, cfg)
    f2 = priorities_from_gradients(1000 * g, r_bar, u, cfg)
    np.testing.assert_allclose(f1.lp, f2.lp, atol=1e-8)
    assert np.argmax(softmax(f1.psi, 1.0)) == np.argmax(softmax(f2.psi, 1.0))


def test_zero_conflict_factor_gets_strict_minimum():
    # objective 0 is exactly opposed to all others: cp_0 = 0 -> psi_0 = 0
    g = np.array([[1.0, 1.0], [-1.0, -1.0], [-2.0, -2.0], [-0.5, -0.5]])
    f = priorities_from_gradients(g, np.full(4, 0.2), np.full(4, 0.9), SchedulerConfig())
    assert f.cp[0] == pytest.approx(0.0, abs=1e-7)
    w = softmax(f.psi, 1.0)
    assert np.all(w[0] < w[1:])


def test_hand_scenario_prefers_unconflicted_needy_objective():
    # objective 1: lp 0.7, cp 0.2, pn 1; objective 2: lp 0.3, cp 1, pn 1.9
    f = combine_factors([0.7, 0.3], [0.2, 1.0], [1.0, 1.9])
    np.testing.assert_allclose(f.psi, [0.14, 0.57])
    assert np.argmax(compute_weights(f, 1.0).w) == 1


def test_lp_only_favours_dominant_norm():
    g = np.array([[10.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    cfg = SchedulerConfig(alpha=0, beta=0)
    f = priorities_from_gradients(g, np.full(3, 0.1), np.full(3, 0.9), cfg)
    np.testing.assert_allclose(f.psi, f.lp)
    assert np.argmax(softmax(f.psi, 1.0)) == 0


def test_gates_select_factors():
    lp, cp, pn = [0.5, 0.5], [0.4, 1.0], [1.5, 1.0]
    assert np.allclose(combine_factors(lp, cp, pn, 0, 1).psi, [0.75, 0.5])
    assert np.allclose(combine_factors(lp, cp, pn, 1, 0).psi, [0.2, 0.5])
    assert np.allclose(combine_factors(lp, cp, pn, 1, 1, lp_gate=0).psi, [0.6, 1.0])


def test_config_validation():
    with pytest.raises(ConfigError):
        SchedulerConfig(weighting="bogus")
    with pytest.raises(ConfigError):
        SchedulerConfig(tau=0)
    with pytest.raises(ConfigError):
        SchedulerConfig(alpha=2)


def test_gradient_estimate_constant_reward_is_zero_and_duplicates_match():
    p = FlowPolicyParams.random(np.random.default_rng(2))
    rng = np.random.default_rng(3)
    rewards = [(1.0, r, r) for r in rng.random(8)]
    g = estimate_objective_gradients(p, microbatch(p, rewards), GRID, SCHED)
    assert np.array_equal(g[0], np.zeros_like(g[0]))
    assert np.array_equal(g[1], g[2])
    assert g.shape == (3, p.weights.size)
    with pytest.raises(DomainError):
        estimate_objective_gradients(p, microbatch(p, rewards[:1]), GRID, SCHED)


def test_scheduler_step_static_and_p3():
    p = FlowPolicyParams.random(np.random.default_rng(4))
    rewards = np.random.default_rng(5).random((8, 3))
    mb = microbatch(p, list(rewards))
    u = np.full(3, 0.9)
    static = SchedulerConfig("static")
    st_ = init_scheduler(static, 3, p.weights.size)
    for _ in range(3):
        w, f, g = scheduler_step(st_, p, mb, [0.1, 0.5, 0.9], u, static, GRID, SCHED)
        assert np.array_equal(w.w, np.full(3, 1 / 3)) and f is None and g is None
    cfg = SchedulerConfig()
    st_ = init_scheduler(cfg, 3, p.weights.size)
    w, f, g = scheduler_step(st_, p, mb, [0.1, 0.5, 0.9], u, cfg, GRID, SCHED)
    assert np.all(g.initialized) and np.array_equal(g.ema, g.raw)
    np.testing.assert_allclose(w.w, softmax(f.psi, 1.0))
    onehot = SchedulerConfig("onehot", target=2)
    w, _, _ = scheduler_step(init_scheduler(onehot, 3, 1), p, mb, [0, 0, 0], u, onehot, GRID, SCHED)
    assert np.array_equal(w.w, [0.0, 0.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1), st.sampled_from([0.5, 1.0, 2.0]))
def test_weight_bounds_hold_for_any_priorities(K, seed, tau):
    rng = np.random.default_rng(seed)
    prev = softmax(rng.uniform(0, 2, K), tau)
    w = softmax(rng.uniform(0, 2, K), tau)
    check_weight_bounds(w, prev, tau)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_factor_ranges_for_any_gradients(K, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(K, 7)) * rng.uniform(0, 10, size=(K, 1))
    u = rng.uniform(0.01, 1, K)
    r_bar = rng.uniform(0, 1.5, K) * u
    f = priorities_from_gradients(g, r_bar, u, SchedulerConfig())
    assert np.all((0 <= f.lp) & (f.lp <= 1))
    assert np.all((0 <= f.cp) & (f.cp <= 1))
    assert np.all((1 <= f.pn) & (f.pn < 2))
    assert np.all((0 <= f.psi) & (f.psi <= 2))
