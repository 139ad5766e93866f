"""Adaptive objective weighting from learning potential, conflict and progress need.

Each objective gets a priority ``psi_k = lp_k * cp_k * pn_k`` (each factor can
be gated off) and weights are the temperature softmax of the priorities.
Because ``psi_k`` lies in ``[0, 2]`` the weights keep a bounded ratio and move
by a bounded L1 amount between steps; both bounds are checked after every
update.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dsan import EPS, stage1_standardize
from .errors import ConfigError, ContractViolation, DomainError, InvariantFailure
from .flowmatch import FlowPolicyParams, NoiseSchedule, TimeGrid, step_log_probs_and_scores

HISTORY_LEN = 64
BOUND_TOL = 1e-6


@dataclass(frozen=True)
class GradientEstimates:
    raw: np.ndarray            # (K, P)
    ema: np.ndarray            # (K, P)
    gamma: float = 0.8
    initialized: np.ndarray = None  # (K,) bool

    @classmethod
    def empty(cls, K: int, P: int, gamma: float = 0.8) -> GradientEstimates:
        return cls(np.zeros((K, P)), np.zeros((K, P)), gamma, np.zeros(K, dtype=bool))


@dataclass(frozen=True)
class PriorityFactors:
    lp: np.ndarray
    cp: np.ndarray
    pn: np.ndarray
    psi: np.ndarray
    gates: tuple[int, int] = (1, 1)   # (alpha, beta): exponents on cp and pn
    lp_gate: int = 1


@dataclass
class WeightState:
    w: np.ndarray
    tau: float = 1.0
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN))

    @classmethod
    def uniform(cls, K: int, tau: float = 1.0) -> WeightState:
        return cls(np.full(K, 1.0 / K), tau)


@dataclass(frozen=True)
class SchedulerConfig:
    """Gates and constants of the weighting rule.

    ``weighting`` is ``"p3"`` (adaptive), ``"static"`` (uniform, scheduler
    bypassed) or ``"onehot"`` (all weight on objective ``target``).
    """

    weighting: str = "p3"
    lp_gate: int = 1
    alpha: int = 1
    beta: int = 1
    tau: float = 1.0
    gamma: float = 0.8
    eps: float = EPS
    target: int = 0

    def __post_init__(self):
        if self.weighting not in ("p3", "static", "onehot"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if not self.tau > 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("EMA decay must lie in [0, 1)")
        for g in (self.lp_gate, self.alpha, self.beta):
            if g not in (0, 1):
                raise ConfigError("factor gates must be 0 or 1")


@dataclass
class SchedulerState:
    grads: GradientEstimates
    weights: WeightState
    step: int = 0


def estimate_objective_gradients(params: FlowPolicyParams, microbatch, grid: TimeGrid,
                                 sched: NoiseSchedule, eps: float = EPS) -> np.ndarray:
    """Score-function estimates of every objective's policy gradient.

    ``microbatch`` is a sequence of ``(Trajectory, reward_vector)`` pairs. Each
    objective's rewards are standardized over the micro-batch, so row ``k`` of
    the result estimates ``grad J_k / std(R_k)``. Returns a ``(K, d * F)``
    array, one flattened gradient per objective.
    """
    if len(microbatch) < 2:
        raise DomainError("gradient estimation needs a micro-batch of at least two")
    states = np.stack([traj.states for traj, _ in microbatch])
    rewards = np.stack([np.asarray(r, dtype=float) for _, r in microbatch])
    return _gradients_from_arrays(params, states, rewards, grid, sched, eps)


def _gradients_from_arrays(params, states, rewards, grid, sched, eps):
    _, scores = step_log_probs_and_scores(params, states, grid, sched)
    traj_scores = scores.sum(axis=1).reshape(states.shape[0], -1)
    adv = stage1_standardize(rewards, eps)
    return adv.T @ traj_scores / states.shape[0]


def ema_update(est: GradientEstimates, raw) -> GradientEstimates:
    raw = np.asarray(raw, dtype=float)
    if raw.shape != est.ema.shape:
        raise ContractViolation(f"gradient shape {raw.shape} != {est.ema.shape}")
    init = est.initialized if est.initialized is not None else np.zeros(raw.shape[0], bool)
    blended = est.gamma * est.ema + (1.0 - est.gamma) * raw
    ema = np.where(init[:, None], blended, raw)
    return replace(est, raw=raw, ema=ema, initialized=np.ones_like(init))


def learning_potential(grads, eps: float = EPS) -> np.ndarray:
    norms = np.linalg.norm(np.asarray(grads, dtype=float), axis=1)
    if norms.shape[0] < 2:
        raise DomainError("learning potential needs K >= 2")
    return norms / (norms.sum() + eps)


def pairwise_cosines(grads, eps: float = EPS) -> np.ndarray:
    g = np.asarray(grads, dtype=float)
    norms = np.linalg.norm(g, axis=1)
    gram = g @ g.T
    gram = 0.5 * (gram + gram.T)
    return np.clip(gram / (np.outer(norms, norms) + eps), -1.0, 1.0)


def conflict_penalty(grads, eps: float = EPS) -> np.ndarray:
    """``1 + mean over others of min(0, cos)``; 1 means no conflict, 0 total opposition."""
    cos = pairwise_cosines(grads, eps)
    K = cos.shape[0]
    if K < 2:
        raise DomainError("conflict penalty needs K >= 2")
    neg = np.minimum(0.0, cos)
    np.fill_diagonal(neg, 0.0)
    return 1.0 + neg.sum(axis=1) / (K - 1)


def progress_need(r_bar, u, eps: float = EPS) -> np.ndarray:
    r_bar = np.asarray(r_bar, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ConfigError(f"utopia points must be positive, got {u}")
    return 1.0 + np.maximum(0.0, (u - r_bar) / (u + eps))


def combine_factors(lp, cp, pn, alpha: int = 1, beta: int = 1, lp_gate: int = 1) -> PriorityFactors:
    lp, cp, pn = (np.asarray(a, dtype=float) for a in (lp, cp, pn))
    psi = lp ** lp_gate * cp ** alpha * pn ** beta
    return PriorityFactors(lp, cp, pn, psi, (alpha, beta), lp_gate)


def softmax(psi, tau: float) -> np.ndarray:
    z = np.asarray(psi, dtype=float) / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def check_weight_bounds(w: np.ndarray, prev: np.ndarray | None, tau: float) -> None:
    """Raise :class:`InvariantFailure` if a weight update breaks the stability bounds."""
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvariantFailure(f"weights left the simplex: {w}")
    if w.min() <= 0 or w.max() / w.min() > np.exp(2.0 / tau) + BOUND_TOL:
        raise InvariantFailure(f"weight ratio exceeds exp(2/tau): {w}")
    if prev is not None and np.abs(w - prev).sum() > 2.0 * (1.0 - np.exp(-2.0 / tau)) + BOUND_TOL:
        raise InvariantFailure(f"weight step too large: {prev} -> {w}")


def compute_weights(factors: PriorityFactors, tau: float, state: WeightState | None = None,
                    step: int = 0) -> WeightState:
    """Softmax of the priorities at temperature ``tau``, checked against the bounds."""
    if not tau > 0:
        raise ConfigError("temperature must be positive")
    if not np.all(np.isfinite(factors.psi)):
        raise DomainError("priorities must be finite")
    w = softmax(factors.psi, tau)
    prev = state.w if state is not None else None
    check_weight_bounds(w, prev, tau)
    history = state.history if state is not None else deque(maxlen=HISTORY_LEN)
    history.append((step, w.copy(), factors.psi.copy(), factors))
    return WeightState(w, tau, history)


def fixed_weights(config: SchedulerConfig, K: int) -> np.ndarray:
    if config.weighting == "static":
        return np.full(K, 1.0 / K)
    if config.weighting == "onehot":
        if not 0 <= config.target < K:
            raise ConfigError(f"specialist target {config.target} out of range for K = {K}")
        w = np.zeros(K)
        w[config.target] = 1.0
        return w
    raise ConfigError("adaptive weighting has no fixed weights")


def init_scheduler(config: SchedulerConfig, K: int, P: int) -> SchedulerState:
    return SchedulerState(GradientEstimates.empty(K, P, config.gamma), WeightState.uniform(K, config.tau))


def priorities_from_gradients(grads, r_bar, u, config: SchedulerConfig) -> PriorityFactors:
    lp = learning_potential(grads, config.eps)
    cp = conflict_penalty(grads, config.eps)
    pn = progress_need(r_bar, u, config.eps)
    return combine_factors(lp, cp, pn, config.alpha, config.beta, config.lp_gate)


def scheduler_step(state: SchedulerState, params: FlowPolicyParams, microbatch: Sequence,
                   r_bar, u, config: SchedulerConfig, grid: TimeGrid, sched: NoiseSchedule):
    """One weight update. Returns ``(WeightState, PriorityFactors | None, GradientEstimates | None)``.

    Fixed weightings bypass gradient estimation and return ``None`` factors.
    """
    K = len(np.asarray(u))
    if config.weighting != "p3":
        state.weights = WeightState(fixed_weights(config, K), config.tau, state.weights.history)
        state.step += 1
        return state.weights, None, None
    raw = estimate_objective_gradients(params, microbatch, grid, sched, config.eps)
    state.grads = ema_update(state.grads, raw)
    factors = priorities_from_gradients(state.grads.ema, r_bar, u, config)
    state.weights = compute_weights(factors, config.tau, state.weights, state.step)
    state.step += 1
    return state.weights, factors, state.grads
