from __future__ import annotations

import numpy as np
import pytest

from apexlab.errors import ConfigError, DomainError
from apexlab.flowmatch import Context, FlowPolicyParams, Mode, NoiseSchedule, TimeGrid, rollout
from apexlab.rewards import (
    BENCHMARK_UTOPIA,
    RewardSpec,
    UtopiaPoints,
    batch_running_performance,
    default_benchmark_specs,
    default_contexts,
    estimate_utopia,
    evaluate_rewards,
    evaluate_rewards_batch,
    benchmark_utopia,
)

ORIGIN = Context(0)


def test_peak_values():
    region = RewardSpec("discrete_region", {"center": (1.0, 2.0), "radius": 0.5, "payoff": 0.8})
    radial = RewardSpec("smooth_radial", {"center": (-1.0, 0.0), "bandwidth": 1.0}, r_max=0.3)
    r = evaluate_rewards_batch(np.array([[1.0, 2.0], [-1.0, 0.0]]), ORIGIN, [region, radial])
    assert r[0, 0] == 0.8
    assert r[1, 1] == pytest.approx(0.3)


def test_formulas_against_hand_evaluation():
    x = np.array([0.6, -0.2])
    radial = RewardSpec("smooth_radial", {"center": (0.0, 1.0), "bandwidth": 2.0}, r_max=0.5)
    direc = RewardSpec("directional", {"direction": (3.0, 4.0), "scale": 2.0}, r_max=0.5)
    ridge = RewardSpec("ridge", {"axis": (1.0, 0.0), "width": 0.5, "offset": (0.0, 1.0)}, r_max=0.5)
    got = evaluate_rewards(x, ORIGIN, [radial, direc, ridge])
    sq = 0.6 ** 2 + 1.2 ** 2
    assert got[0] == pytest.approx(0.5 * np.exp(-sq / 8.0))
    assert got[1] == pytest.approx(0.5 * (0.5 + 0.5 * (0.6 * 0.6 - 0.2 * 0.8) / 2.0))
    assert got[2] == pytest.approx(0.5 * np.exp(-(1.2 ** 2) / (2 * 0.25)))


def test_far_states_decay_to_zero():
    specs = default_benchmark_specs()
    far = np.array([[1e4, -1e4 * 0.6]])  # pointing against the directional objective
    r = evaluate_rewards_batch(far, ORIGIN, specs)
    assert np.all(r <= 1e-12)


def test_boundedness_random_sampling():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 3, size=(100_000, 2))
    for spec in default_benchmark_specs():
        r = evaluate_rewards_batch(x, ORIGIN, [spec, spec])[:, 0]
        assert r.min() >= 0 and r.max() <= spec.r_max


def test_discrete_variance_dominates_smooth():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100_000, 2))
    radius = np.sqrt(2 * np.log(2))  # hit-rate 0.5 for a region centred at the origin
    region = RewardSpec("discrete_region", {"center": (0.0, 0.0), "radius": radius, "payoff": 1.0})
    radial = RewardSpec("smooth_radial", {"center": (0.0, 0.0), "bandwidth": 2.0})
    r = evaluate_rewards_batch(x, ORIGIN, [region, radial])
    assert r[:, 0].mean() == pytest.approx(0.5, abs=0.01)
    assert r[:, 0].var() == pytest.approx(0.25, abs=0.01)
    assert r[:, 0].var() >= 3 * r[:, 1].var()


def test_default_benchmark_heterogeneity_under_initial_policy():
    grid, sched = TimeGrid(10), NoiseSchedule(0.7)
    rng = np.random.default_rng(2)
    n = 4000
    states, _ = rollout(FlowPolicyParams.zeros(), rng.normal(size=(n, 2)), rng.normal(size=(n, 10, 2)), grid, sched)
    r = evaluate_rewards_batch(states[:, -1], ORIGIN, default_benchmark_specs())
    sd = r.std(axis=0)
    assert np.all(sd[0] >= 2 * sd[1:])


def test_default_benchmark_has_conflicting_smooth_gradients():
    # finite-difference reward gradients of the smooth objectives; some pair must oppose somewhere
    specs = default_benchmark_specs()[1:]
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2000, 2))
    h = 1e-5
    grads = []
    for s in specs:
        g = np.stack([(s(x + h * e) - s(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
        grads.append(g)
    found = any(np.mean(np.sum(grads[a] * grads[b], axis=1) < 0) > 0.05
                for a in range(3) for b in range(a + 1, 3))
    assert found


def test_multi_mode_frames():
    spec = RewardSpec("smooth_radial", {"center": (0.0, 0.0), "bandwidth": 1.0})
    ctx = Context(1, (Mode((1.0, 0.0)), Mode((0.0, 0.0), 2.0)))
    r = evaluate_rewards(np.array([1.0, 0.0]), ctx, [spec, spec])
    assert r[0] == pytest.approx(1.0)
    assert r[1] == pytest.approx(np.exp(-0.125))
    with pytest.raises(ConfigError):
        evaluate_rewards(np.zeros(2), ctx, [spec, spec, spec])


def test_spec_validation():
    with pytest.raises(ConfigError):
        RewardSpec("bogus")
    with pytest.raises(ConfigError):
        RewardSpec("smooth_radial", {"center": (0, 0)})
    with pytest.raises(ConfigError):
        RewardSpec("directional", {"direction": (0, 0), "scale": 1.0})
    with pytest.raises(ConfigError):
        RewardSpec("discrete_region", {"center": (0, 0), "radius": 1, "payoff": 2}, r_max=1.0)
    with pytest.raises(ConfigError):
        evaluate_rewards(np.zeros(2), ORIGIN, default_benchmark_specs()[:1])


def test_running_performance():
    assert np.array_equal(batch_running_performance([[0.2, 0.4]]), [0.2, 0.4])
    np.testing.assert_allclose(batch_running_performance([[0, 1], [1, 0]]), [0.5, 0.5])
    rng = np.random.default_rng(4)
    vs = rng.random((1000, 4))
    two_pass = np.array([sum(v[k] for v in vs) / len(vs) for k in range(4)])
    np.testing.assert_allclose(batch_running_performance(vs), two_pass, atol=1e-12)
    with pytest.raises(DomainError):
        batch_running_performance([])


def test_utopia_estimation():
    assert estimate_utopia([np.full(80, 0.9), np.full(80, 0.5)]).u == pytest.approx((0.9, 0.5))
    trace = np.linspace(0.1, 0.8, 200)
    brute = max(trace[i:i + 50].mean() for i in range(151))
    u = estimate_utopia([trace, trace]).u[0]
    assert u == pytest.approx(brute, abs=1e-12)
    assert u == pytest.approx(trace[-50:].mean(), abs=1e-12)
    assert estimate_utopia([[0.1] * 60, [0.1] * 60], floor=(0.5, 0.0)).u == pytest.approx((0.5, 0.1))
    with pytest.raises(DomainError):
        estimate_utopia([[], [1.0]])


def test_utopia_presets():
    u = benchmark_utopia()
    assert u.u == BENCHMARK_UTOPIA == (0.92, 0.90, 0.86, 0.62)
    assert u.source == "configured"
    with pytest.raises(ConfigError):
        UtopiaPoints((0.5, 0.0))


def test_default_contexts_are_fixed():
    a, b = default_contexts(), default_contexts()
    assert a == b and len(a) == 16
    assert len({c.id for c in a}) == 16
