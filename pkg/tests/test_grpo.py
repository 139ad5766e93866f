from __future__ import annotations

import numpy as np
import pytest

from apexlab import dsan
from apexlab.errors import ConfigError, ContractViolation, DomainError, InvariantFailure
from apexlab.flowmatch import (
    Context,
    FlowPolicyParams,
    NoiseSchedule,
    TimeGrid,
    kl_trajectory,
    transition_moments,
)
from apexlab.grpo import (
    AdamState,
    ClipConfig,
    RolloutStreams,
    TrainingSetup,
    clipped_surrogate,
    collect_group,
    grpo_loss_and_grad,
    init_training_state,
    likelihood_ratio,
    optimizer_step,
    training_step,
)
from apexlab.rewards import default_benchmark_specs, default_contexts
from apexlab.scheduler import SchedulerConfig

GRID, SCHED = TimeGrid(10), NoiseSchedule(0.7)
SPECS = tuple(default_benchmark_specs())
CTX = Context(0)


def group(params=None, G=8, seed=0, sched=SCHED):
    params = params or FlowPolicyParams.random(np.random.default_rng(seed))
    return collect_group(params, CTX, G, GRID, sched, SPECS, RolloutStreams(seed, 0))


def perturbed(p, scale=0.05, seed=1):
    return FlowPolicyParams(p.weights + np.random.default_rng(seed).normal(0, scale, p.weights.shape),
                            p.feature_seed)


def test_group_shape_and_determinism():
    g1, g2 = group(), group()
    assert g1.G == 8 and g1.rewards.shape == (8, 4)
    assert all(t.T == 10 for t in g1.trajectories)
    assert np.array_equal(g1.states, g2.states)
    assert np.array_equal(g1.rewards, g2.rewards)
    with pytest.raises(DomainError):
        group(G=1)


def test_group_members_use_distinct_noise():
    g = group()
    noises = np.stack([t.noise_draws for t in g.trajectories])
    assert len({n.tobytes() for n in noises}) == g.G


def test_zero_noise_group_collapses():
    g = group(sched=NoiseSchedule(0.0))
    assert np.all(g.states[:, -1] == g.states[0, -1])
    assert np.array_equal(dsan.stage1_standardize(g.rewards), np.zeros_like(g.rewards))


def test_likelihood_ratio_identities():
    g = group()
    p = g.behavior_params
    q = perturbed(p)
    traj = g.trajectories[0]
    for t in (1, 5, 10):
        assert likelihood_ratio(p, p, traj, t, GRID, SCHED) == 1.0
        r_ab = likelihood_ratio(q, p, traj, t, GRID, SCHED)
        r_ba = likelihood_ratio(p, q, traj, t, GRID, SCHED)
        assert r_ab * r_ba == pytest.approx(1.0, rel=1e-12)
        # direct density quotient from the Gaussian moments
        i = GRID.T - t
        x, y = traj.states[i], traj.states[i + 1]

        def dens(params):
            m = transition_moments(params, x, GRID.time(t), GRID, SCHED)
            return np.exp(-np.sum((y - m.mean) ** 2) / (2 * m.variance)) / (2 * np.pi * m.variance)

        assert r_ab == pytest.approx(dens(q) / dens(p), rel=1e-10)
    with pytest.raises(ContractViolation):
        likelihood_ratio(p, p, traj, 0, GRID, SCHED)


def test_clipped_surrogate_cases():
    assert clipped_surrogate(1.0, 0.37, 0.2) == pytest.approx(0.37)
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)


def test_on_policy_start():
    g = group()
    p = g.behavior_params
    adv = dsan.dsan_advantages(g.rewards, np.full(4, 0.25)).final
    loss, grad, diag = grpo_loss_and_grad(g, adv, p, p.copy(), ClipConfig(), GRID, SCHED)
    assert loss == pytest.approx(-adv.mean(), abs=1e-12)
    assert diag.clip_fraction == 0.0 and diag.mean_kl_to_ref == 0.0


def test_zero_advantages_and_no_kl_give_zero():
    g = group()
    q = perturbed(g.behavior_params)
    loss, grad, _ = grpo_loss_and_grad(g, np.zeros(8), q, perturbed(q, seed=5),
                                       ClipConfig(beta_kl=0.0), GRID, SCHED)
    assert loss == 0.0 and np.all(grad == 0)


def _loss(params, g, adv, ref, clip):
    return grpo_loss_and_grad(g, adv, params, ref, clip, GRID, SCHED)[0]


def test_surrogate_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    g = group(G=12, seed=3)
    ref = g.behavior_params
    params = perturbed(ref, 0.1, seed=8)   # off-policy so ratios and clipping are non-trivial
    adv = rng.normal(size=12)
    clip = ClipConfig(0.2, 0.5)
    _, grad, diag = grpo_loss_and_grad(g, adv, params, ref, clip, GRID, SCHED)
    assert 0 < diag.clip_fraction < 1
    h = 1e-6
    checked = 0
    for _ in range(40):
        a, b = rng.integers(2), rng.integers(64)
        Wp, Wm = params.weights.copy(), params.weights.copy()
        Wp[a, b] += h
        Wm[a, b] -= h
        fd = (_loss(FlowPolicyParams(Wp), g, adv, ref, clip) - _loss(FlowPolicyParams(Wm), g, adv, ref, clip)) / (2 * h)
        if abs(fd) < 1e-6:
            continue
        assert grad[a, b] == pytest.approx(fd, rel=1e-2)
        checked += 1
        if checked >= 10:
            break
    assert checked >= 10


def test_loss_kl_term_matches_trajectory_kl():
    g = group()
    ref = g.behavior_params
    q = perturbed(ref, 0.1)
    _, _, diag = grpo_loss_and_grad(g, np.zeros(8), q, ref, ClipConfig(), GRID, SCHED)
    expect = np.mean([kl_trajectory(q, ref, t, GRID, SCHED) for t in g.trajectories])
    assert diag.mean_kl_to_ref == pytest.approx(expect, rel=1e-12)


def test_shape_contracts():
    g = group()
    p = g.behavior_params
    with pytest.raises(ContractViolation):
        grpo_loss_and_grad(g, np.zeros(7), p, p, ClipConfig(), GRID, SCHED)
    with pytest.raises(ConfigError):
        ClipConfig(eps_clip=1.0)


def test_adam_zero_gradient_and_first_step():
    p = FlowPolicyParams.random(np.random.default_rng(9))
    opt = AdamState.like(p)
    same = optimizer_step(opt, p, np.zeros_like(p.weights))
    assert np.array_equal(same.weights, p.weights)
    opt = AdamState.like(p)
    g = np.random.default_rng(10).normal(size=p.weights.shape)
    new = optimizer_step(opt, p, g)
    np.testing.assert_allclose(new.weights - p.weights, -3e-4 * g / (np.abs(g) + 1e-8), rtol=1e-9)


def test_adam_hand_iteration():
    p = FlowPolicyParams(np.zeros((1, 1)))
    opt = AdamState.like(p, lr=0.1)
    m = v = 0.0
    x = 0.0
    for k in range(1, 4):
        p = optimizer_step(opt, p, np.ones((1, 1)))
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        x -= 0.1 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        assert opt.m[0, 0] == pytest.approx(m) and opt.v[0, 0] == pytest.approx(v)
        assert p.weights[0, 0] == pytest.approx(x)


def test_adam_rejects_non_finite_gradient():
    p = FlowPolicyParams.zeros()
    g = np.zeros_like(p.weights)
    g[0, 0] = np.nan
    with pytest.raises(InvariantFailure):
        optimizer_step(AdamState.like(p), p, g)


def setup(weighting="static", advantage="naive", seed=0, **kw):
    return TrainingSetup(GRID, SCHED, SPECS, tuple(default_contexts()), (0.94, 0.0436, 0.048, 0.0412),
                         SchedulerConfig(weighting, **kw), advantage=advantage, run_seed=seed)


def test_static_step_changes_params_with_uniform_weights():
    s = setup()
    state = init_training_state(s, FlowPolicyParams.zeros())
    before = state.params.weights.copy()
    state, diag = training_step(state, s)
    assert not np.array_equal(state.params.weights, before)
    assert np.array_equal(diag.weights, np.full(4, 0.25))
    assert state.scheduler is None
    assert diag.clip_fraction == 0.0 and diag.mean_kl_to_ref == 0.0


def test_training_is_deterministic():
    def trace(seed):
        s = setup("p3", "dsan", seed=seed)
        state = init_training_state(s, FlowPolicyParams.zeros())
        out = []
        for _ in range(5):
            state, d = training_step(state, s)
            out.append((d.loss, d.pre_norm_variance, tuple(d.weights), tuple(d.reward_means)))
        return out, state.params.weights

    a, wa = trace(1)
    b, wb = trace(1)
    c, _ = trace(2)
    assert a == b and np.array_equal(wa, wb)
    assert a != c


def test_specialist_raises_discrete_reward():
    s = setup("onehot", "dsan", target=0)
    state = init_training_state(s, FlowPolicyParams.zeros())
    rewards = []
    for _ in range(200):
        state, d = training_step(state, s)
        rewards.append(d.reward_means[0])
    assert np.mean(rewards[-50:]) > np.mean(rewards[:50]) + 0.1
    assert np.all(np.array(rewards) <= SPECS[0].r_max)


def test_setup_validation():
    with pytest.raises(ConfigError):
        setup(advantage="other")
    with pytest.raises(ConfigError):
        TrainingSetup(GRID, NoiseSchedule(0.0), SPECS, tuple(default_contexts()), (1, 1, 1, 1))
