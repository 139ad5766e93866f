"""Group-relative policy optimization for the toy flow policy.

One training step samples B contexts, rolls out a group of G trajectories per
context under the frozen behaviour policy, turns the per-objective rewards
into one advantage per trajectory, and takes an Adam step on the clipped
surrogate plus the analytic KL to the frozen reference policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dsan
from .errors import ConfigError, ContractViolation, DomainError, InvariantFailure
from .flowmatch import (
    Context,
    FlowPolicyParams,
    NoiseSchedule,
    TimeGrid,
    Trajectory,
    kl_steps_and_grad,
    log_prob_step,
    rollout,
    step_log_probs_and_scores,
)
from .rewards import RewardSpec, batch_running_performance, evaluate_rewards_batch
from .scheduler import (
    PriorityFactors,
    SchedulerConfig,
    SchedulerState,
    _gradients_from_arrays,
    compute_weights,
    ema_update,
    fixed_weights,
    init_scheduler,
    priorities_from_gradients,
)

_PURPOSES = {"init": 1, "member": 2, "sched_init": 3, "sched_member": 4, "contexts": 5, "eval": 6}


@dataclass(frozen=True)
class RolloutStreams:
    """Derives independent generators from ``(run_seed, step, purpose, ...)``.

    Every stream is keyed by a SeedSequence over those integers, so group
    members never share randomness and sampling order does not matter.
    """

    run_seed: int
    step: int = 0

    def get(self, purpose: str, *keys: int) -> np.random.Generator:
        entropy = [int(self.run_seed), _PURPOSES[purpose], int(self.step), *map(int, keys)]
        return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class RolloutGroup:
    context: Context
    trajectories: list[Trajectory]
    rewards: np.ndarray              # (G, K)
    behavior_params: FlowPolicyParams

    @property
    def G(self) -> int:
        return len(self.trajectories)

    @property
    def states(self) -> np.ndarray:
        return np.stack([t.states for t in self.trajectories])

    @property
    def behavior_logprobs(self) -> np.ndarray:
        return np.stack([t.step_logprobs for t in self.trajectories])


def _sample_states(params, context, n, grid, sched, streams, init_purpose, member_purpose):
    x_init = streams.get(init_purpose, context.id).standard_normal(params.d)
    noise = np.stack([streams.get(member_purpose, context.id, i).standard_normal((grid.T, params.d))
                      for i in range(n)])
    states, logps = rollout(params, np.broadcast_to(x_init, (n, params.d)), noise, grid, sched)
    return states, logps, noise


def collect_group(policy_old: FlowPolicyParams, context: Context, G: int, grid: TimeGrid,
                  sched: NoiseSchedule, specs: Sequence[RewardSpec],
                  streams: RolloutStreams) -> RolloutGroup:
    """Roll out ``G`` trajectories for one context.

    Group members share the context's initial latent and differ only through
    their own SDE noise streams.
    """
    if G < 2:
        raise DomainError("a group needs at least two rollouts")
    states, logps, noise = _sample_states(policy_old, context, G, grid, sched, streams,
                                          "init", "member")
    trajs = [Trajectory(states[i], logps[i], noise[i], context.id) for i in range(G)]
    rewards = evaluate_rewards_batch(states[:, -1], context, specs)
    return RolloutGroup(context, trajs, rewards, policy_old)


def likelihood_ratio(params: FlowPolicyParams, behavior_params: FlowPolicyParams,
                     traj: Trajectory, t: int, grid: TimeGrid, sched: NoiseSchedule) -> float:
    """``pi_theta / pi_old`` for the stored transition leaving grid index ``t``."""
    if not 1 <= t <= grid.T:
        raise ContractViolation(f"transition index {t} outside [1, {grid.T}]")
    i = grid.T - t
    j_t = grid.time(t)
    x_from, x_to = traj.states[i], traj.states[i + 1]
    diff = (log_prob_step(params, x_from, x_to, j_t, grid, sched)
            - log_prob_step(behavior_params, x_from, x_to, j_t, grid, sched))
    if not np.isfinite(diff):
        raise DomainError(f"non-finite log-probability difference at step t = {t}")
    return float(np.exp(diff))


def clipped_surrogate(ratio, advantage, eps_clip: float):
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * advantage)


@dataclass(frozen=True)
class ClipConfig:
    eps_clip: float = 0.2
    beta_kl: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError("clip radius must lie in (0, 1)")
        if not self.beta_kl >= 0:
            raise ConfigError("KL coefficient must be nonnegative")


@dataclass
class StepDiagnostics:
    mean_kl_to_ref: float
    clip_fraction: float
    reward_means: np.ndarray
    pre_norm_variance: float
    weights: np.ndarray
    loss: float = 0.0
    factors: PriorityFactors | None = None


def _surrogate_loss_and_grad(params, ref_params, states, old_logps, adv, clip, grid, sched):
    logps, scores, feats = step_log_probs_and_scores(params, states, grid, sched, return_features=True)
    ratio = np.exp(logps - old_logps)
    A = np.asarray(adv, dtype=float)[:, None]
    unclipped = ratio * A
    clipped = np.clip(ratio, 1.0 - clip.eps_clip, 1.0 + clip.eps_clip) * A
    n_terms = ratio.size
    # ties go to the unclipped branch, whose gradient is then the true one
    active = unclipped <= clipped
    surr = np.where(active, unclipped, clipped)
    coef = np.where(active, A * ratio, 0.0)
    grad_pg = -np.einsum("nt,ntdf->df", coef, scores) / n_terms
    kl, kl_grad = kl_steps_and_grad(params, ref_params, states, grid, sched, feats)
    loss = -surr.sum() / n_terms + clip.beta_kl * kl.sum() / n_terms
    grad = grad_pg + clip.beta_kl * kl_grad / n_terms
    clip_fraction = float(np.mean(~active))
    mean_kl = float(kl.sum(axis=1).mean())
    return float(loss), grad, clip_fraction, mean_kl


def grpo_loss_and_grad(groups, advantages, params: FlowPolicyParams, ref_params: FlowPolicyParams,
                       clip: ClipConfig, grid: TimeGrid, sched: NoiseSchedule):
    """Clipped-surrogate loss with KL penalty, its gradient w.r.t. ``W``, and diagnostics.

    ``groups`` is one :class:`RolloutGroup` or a list of equally sized groups
    with matching advantage vectors; the loss is averaged over groups.
    """
    if isinstance(groups, RolloutGroup):
        groups, advantages = [groups], [advantages]
    if len(groups) != len(advantages):
        raise ContractViolation("one advantage vector per group is required")
    for g, a in zip(groups, advantages):
        if np.shape(a) != (g.G,):
            raise ContractViolation(f"advantages of shape {np.shape(a)} for a group of {g.G}")
    if len({g.G for g in groups}) != 1:
        raise ContractViolation("groups must share the group size")
    states = np.concatenate([g.states for g in groups])
    old = np.concatenate([g.behavior_logprobs for g in groups])
    adv = np.concatenate([np.asarray(a, dtype=float) for a in advantages])
    loss, grad, clip_fraction, mean_kl = _surrogate_loss_and_grad(
        params, ref_params, states, old, adv, clip, grid, sched)
    rewards = np.concatenate([g.rewards for g in groups])
    diag = StepDiagnostics(mean_kl, clip_fraction, rewards.mean(axis=0), float("nan"),
                           np.full(rewards.shape[1], np.nan), loss)
    return loss, grad, diag


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: FlowPolicyParams, **kw) -> AdamState:
        return cls(np.zeros_like(params.weights), np.zeros_like(params.weights), **kw)


def optimizer_step(opt: AdamState, params: FlowPolicyParams, gradient) -> FlowPolicyParams:
    """Bias-corrected Adam descent step. Updates ``opt`` in place."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != params.weights.shape:
        raise ContractViolation(f"gradient shape {g.shape} != {params.weights.shape}")
    if not np.all(np.isfinite(g)):
        raise InvariantFailure(f"non-finite gradient at optimizer step {opt.step}")
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    return FlowPolicyParams(params.weights - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps),
                            params.feature_seed)


# ---------------------------------------------------------------------------
# Full training step


@dataclass(frozen=True)
class TrainingSetup:
    grid: TimeGrid
    sched: NoiseSchedule
    specs: tuple[RewardSpec, ...]
    contexts: tuple[Context, ...]
    utopia: tuple[float, ...]
    scheduler: SchedulerConfig = SchedulerConfig()
    clip: ClipConfig = ClipConfig()
    advantage: str = "dsan"          # or "naive"
    run_seed: int = 0
    G: int = 24
    B: int = 4
    eps: float = dsan.EPS
    microbatch_size: int = 8
    scheduler_every: int = 1
    minibatches: int = 1

    def __post_init__(self):
        if self.advantage not in ("dsan", "naive"):
            raise ConfigError(f"unknown advantage construction {self.advantage!r}")
        if len(self.utopia) != len(self.specs):
            raise ConfigError("utopia points and reward specs disagree on K")
        if self.B > len(self.contexts):
            raise ConfigError("more contexts per step than the context pool holds")
        if not 1 <= self.minibatches <= self.B:
            raise ConfigError("minibatches must lie in [1, B]")
        if self.sched.a <= 0:
            raise ConfigError("training needs a stochastic policy (a > 0)")

    @property
    def K(self) -> int:
        return len(self.specs)


@dataclass
class TrainingState:
    params: FlowPolicyParams
    ref_params: FlowPolicyParams
    opt: AdamState
    scheduler: SchedulerState | None
    weights: np.ndarray
    step: int = 0


def scheduler_microbatch(params: FlowPolicyParams, setup: TrainingSetup, streams: RolloutStreams):
    """Dedicated micro-batch for gradient estimation: one context, fresh noise."""
    ctx = setup.contexts[streams.get("contexts", 1).integers(len(setup.contexts))]
    states, _, _ = _sample_states(params, ctx, setup.microbatch_size, setup.grid, setup.sched,
                                  streams, "sched_init", "sched_member")
    return states, evaluate_rewards_batch(states[:, -1], ctx, setup.specs)


def _advantages(group: RolloutGroup, w, setup: TrainingSetup):
    if setup.advantage == "dsan":
        adv = dsan.dsan_advantages(group.rewards, w, setup.eps)
        return adv.final, adv.pre_norm_variance
    scalar = group.rewards @ w
    return dsan.naive_weight_then_normalize(group.rewards, w, setup.eps), float(scalar.var())


def training_step(state: TrainingState, setup: TrainingSetup) -> tuple[TrainingState, StepDiagnostics]:
    streams = RolloutStreams(setup.run_seed, state.step)
    order = streams.get("contexts").permutation(len(setup.contexts))[:setup.B]
    behavior = state.params.copy()
    groups = [collect_group(behavior, setup.contexts[c], setup.G, setup.grid, setup.sched,
                            setup.specs, streams) for c in order]
    r_bar = batch_running_performance([g.rewards for g in groups])

    factors = None
    sch = state.scheduler
    if setup.scheduler.weighting == "p3":
        if state.step % setup.scheduler_every == 0:
            states, rewards = scheduler_microbatch(behavior, setup, streams)
            raw = _gradients_from_arrays(behavior, states, rewards, setup.grid, setup.sched,
                                         setup.scheduler.eps)
            sch.grads = ema_update(sch.grads, raw)
            factors = priorities_from_gradients(sch.grads.ema, r_bar, setup.utopia, setup.scheduler)
            sch.weights = compute_weights(factors, setup.scheduler.tau, sch.weights, state.step)
            sch.step += 1
        w = sch.weights.w
    else:
        w = fixed_weights(setup.scheduler, setup.K)

    advs, variances = zip(*(_advantages(g, w, setup) for g in groups))

    params = state.params
    losses, clips, kls = [], [], []
    for chunk in np.array_split(np.arange(len(groups)), setup.minibatches):
        loss, grad, diag = grpo_loss_and_grad([groups[i] for i in chunk], [advs[i] for i in chunk],
                                              params, state.ref_params, setup.clip,
                                              setup.grid, setup.sched)
        params = optimizer_step(state.opt, params, grad)
        losses.append(loss)
        clips.append(diag.clip_fraction)
        kls.append(diag.mean_kl_to_ref)

    diag = StepDiagnostics(
        mean_kl_to_ref=float(np.mean(kls)),
        clip_fraction=float(np.mean(clips)),
        reward_means=r_bar,
        pre_norm_variance=float(np.mean(variances)),
        weights=np.asarray(w, dtype=float).copy(),
        loss=float(np.mean(losses)),
        factors=factors,
    )
    state.params = params
    state.weights = diag.weights
    state.step += 1
    return state, diag


def init_training_state(setup: TrainingSetup, params: FlowPolicyParams, lr: float = 3e-4,
                        betas=(0.9, 0.999), adam_eps: float = 1e-8) -> TrainingState:
    sch = (init_scheduler(setup.scheduler, setup.K, params.weights.size)
           if setup.scheduler.weighting == "p3" else None)
    w = sch.weights.w.copy() if sch is not None else fixed_weights(setup.scheduler, setup.K)
    return TrainingState(params, params.copy(), AdamState.like(params, lr=lr, beta1=betas[0],
                                                              beta2=betas[1], eps=adam_eps),
                         sch, w)
