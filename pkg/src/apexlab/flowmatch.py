"""Toy stochastic flow-matching policy.

A linear read-out of fixed random Fourier features gives the velocity field
``v(x, j) = W @ phi(x, j)``. Reverse-time sampling uses the Euler-Maruyama
discretisation of the score-corrected SDE, so each transition is an isotropic
Gaussian with closed-form log-density and closed-form KL to a reference
policy that shares the noise schedule.

Time runs from ``j = 1`` (noise) down to ``j = 0`` (data). Trajectory arrays
are stored in sampling order: ``states[0]`` is the latent at ``j = 1`` and
``states[T]`` is the terminal sample at ``j = 0``. Transition ``i`` leaves
grid index ``t = T - i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, DomainError, InvariantFailure

LOG_2PI = float(np.log(2.0 * np.pi))

# Random Fourier feature hyperparameters. State frequencies have unit scale so
# the features resolve structure at the scale of the N(0, I) latent.
FEATURE_STATE_FREQ = 1.0
FEATURE_TIME_FREQ = 3.0


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``j_t = t / T`` for ``t = 0..T``."""

    T: int = 10

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise DomainError(f"TimeGrid needs an integer T >= 2, got {self.T!r}")

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.T + 1) / self.T

    @property
    def delta_j(self) -> float:
        return -1.0 / self.T

    def time(self, t: int) -> float:
        return t / self.T

    def index_of(self, j_t: float) -> int:
        """Grid index of ``j_t``; rejects off-grid times and ``t = 0``."""
        t = int(round(float(j_t) * self.T))
        if abs(t / self.T - float(j_t)) > 1e-12 or not 0 <= t <= self.T:
            raise ContractViolation(f"time {j_t!r} is not a node of a {self.T}-step grid")
        if t == 0:
            raise ContractViolation("no transition leaves the data time j = 0")
        return t


@dataclass(frozen=True)
class NoiseSchedule:
    """``sigma(j) = a * sqrt(j_c / (1 - j_c))`` with ``j_c`` clamped to ``[delta, 1 - delta]``."""

    a: float = 0.7
    clamp_delta: float = 0.05

    def __post_init__(self):
        if not np.isfinite(self.a) or self.a < 0:
            raise DomainError(f"noise level must be finite and >= 0, got {self.a!r}")
        if not 0.0 < self.clamp_delta < 0.5:
            raise DomainError(f"clamp_delta must lie in (0, 0.5), got {self.clamp_delta!r}")

    def clamp(self, j):
        return np.clip(j, self.clamp_delta, 1.0 - self.clamp_delta)

    def sigma(self, j):
        jc = self.clamp(j)
        return self.a * np.sqrt(jc / (1.0 - jc))


class FeatureMap:
    """Fixed random Fourier features ``cos(Omega x + omega j + b)``."""

    def __init__(self, seed: int, d: int, F: int):
        rng = np.random.default_rng(seed)
        self.seed, self.d, self.F = seed, d, F
        self.omega_x = rng.normal(0.0, FEATURE_STATE_FREQ, size=(F, d))
        self.omega_j = rng.normal(0.0, FEATURE_TIME_FREQ, size=F)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=F)
        for arr in (self.omega_x, self.omega_j, self.phase):
            arr.setflags(write=False)

    def __call__(self, x: np.ndarray, j: float) -> np.ndarray:
        return np.cos(x @ self.omega_x.T + (j * self.omega_j + self.phase))


@lru_cache(maxsize=32)
def feature_map(seed: int, d: int, F: int) -> FeatureMap:
    return FeatureMap(seed, d, F)


@dataclass
class FlowPolicyParams:
    """Trainable read-out ``W`` (shape ``d x F``) over a seeded feature map."""

    weights: np.ndarray
    feature_seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2:
            raise DomainError("weights must be a d x F matrix")
        if not np.all(np.isfinite(self.weights)):
            raise DomainError("weights contain non-finite entries")

    @classmethod
    def zeros(cls, d: int = 2, F: int = 64, feature_seed: int = 0) -> FlowPolicyParams:
        return cls(np.zeros((d, F)), feature_seed)

    @classmethod
    def random(cls, rng: np.random.Generator, d: int = 2, F: int = 64,
               feature_seed: int = 0, scale: float = 0.1) -> FlowPolicyParams:
        return cls(rng.normal(0.0, scale, size=(d, F)), feature_seed)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @property
    def F(self) -> int:
        return self.weights.shape[1]

    def features(self, x: np.ndarray, j: float) -> np.ndarray:
        return feature_map(self.feature_seed, self.d, self.F)(x, j)

    def copy(self) -> FlowPolicyParams:
        return FlowPolicyParams(self.weights.copy(), self.feature_seed)


@dataclass(frozen=True)
class TransitionMoments:
    mean: np.ndarray
    variance: float


@dataclass
class Trajectory:
    states: np.ndarray          # (T + 1, d), from j = 1 down to j = 0
    step_logprobs: np.ndarray   # (T,)
    noise_draws: np.ndarray     # (T, d)
    context_id: int = 0

    @property
    def T(self) -> int:
        return self.step_logprobs.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class Mode:
    """A reward frame: rewards for this context are evaluated at ``(x - center) / scale``."""

    center: tuple[float, ...]
    scale: float = 1.0


@dataclass(frozen=True)
class Context:
    """Toy analogue of a prompt: an id plus one shared or K per-objective reward frames."""

    id: int
    target_modes: tuple[Mode, ...] = field(default_factory=lambda: (Mode((0.0, 0.0)),))

    def __post_init__(self):
        if len(self.target_modes) == 0:
            raise DomainError("a context needs at least one mode")
        for m in self.target_modes:
            if not (np.all(np.isfinite(m.center)) and np.isfinite(m.scale) and m.scale > 0):
                raise DomainError(f"invalid mode {m!r}")


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains non-finite values")


def velocity(params: FlowPolicyParams, x: np.ndarray, j: float) -> np.ndarray:
    """``W @ phi(x, j)``; accepts a single state ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    _check_finite(x, "state")
    if not (np.isfinite(j) and 0.0 <= j <= 1.0):
        raise DomainError(f"time must lie in [0, 1], got {j!r}")
    return params.features(x, j) @ params.weights.T


@dataclass(frozen=True)
class _StepCoefficients:
    j: float
    sigma2: float
    variance: float
    drift_x: float   # mean = drift_x * x + drift_v * v
    drift_v: float


@lru_cache(maxsize=1024)
def _coefficients(t: int, grid: TimeGrid, sched: NoiseSchedule) -> _StepCoefficients:
    j = grid.time(t)
    dj = grid.delta_j
    jc = min(max(j, sched.clamp_delta), 1.0 - sched.clamp_delta)
    sigma2 = sched.a ** 2 * (jc / (1.0 - jc))
    c = sigma2 / (2.0 * jc)
    return _StepCoefficients(
        j=j,
        sigma2=sigma2,
        variance=sigma2 * abs(dj),
        drift_x=1.0 + c * dj,
        drift_v=(1.0 + c * (1.0 - j)) * dj,
    )


def transition_moments(params: FlowPolicyParams, x: np.ndarray, j_t: float,
                       grid: TimeGrid, sched: NoiseSchedule) -> TransitionMoments:
    t = grid.index_of(j_t)
    co = _coefficients(t, grid, sched)
    v = velocity(params, x, co.j)
    return TransitionMoments(co.drift_x * np.asarray(x, dtype=float) + co.drift_v * v, co.variance)


def _gaussian_logpdf(x_to, mean, variance):
    d = mean.shape[-1]
    sq = np.sum((x_to - mean) ** 2, axis=-1)
    return -0.5 * d * (LOG_2PI + np.log(variance)) - sq / (2.0 * variance)


def log_prob_step(params: FlowPolicyParams, x_from: np.ndarray, x_to: np.ndarray,
                  j_t: float, grid: TimeGrid, sched: NoiseSchedule):
    """Log-density of ``x_to`` under the Gaussian transition leaving ``x_from`` at ``j_t``."""
    m = transition_moments(params, x_from, j_t, grid, sched)
    if m.variance <= 0:
        raise DomainError("transition variance is zero; log-density undefined (a = 0?)")
    return _gaussian_logpdf(np.asarray(x_to, dtype=float), m.mean, m.variance)


def sample_step(params: FlowPolicyParams, x: np.ndarray, j_t: float, grid: TimeGrid,
                sched: NoiseSchedule, rng: np.random.Generator):
    """One Euler-Maruyama step. Returns ``(x_next, noise, logprob)``.

    With ``a = 0`` the step is the deterministic Euler ODE step and the
    returned log-probability is ``nan`` (a point mass has no density).
    """
    x = np.asarray(x, dtype=float)
    m = transition_moments(params, x, j_t, grid, sched)
    noise = rng.standard_normal(x.shape)
    if sched.a == 0:
        return m.mean.copy(), noise, float("nan")
    if m.variance <= 0:
        raise InvariantFailure(f"zero transition variance at j = {j_t} with a = {sched.a}")
    x_next = m.mean + np.sqrt(m.variance) * noise
    return x_next, noise, _gaussian_logpdf(x_next, m.mean, m.variance)


def rollout(params: FlowPolicyParams, x_init: np.ndarray, noise: np.ndarray,
            grid: TimeGrid, sched: NoiseSchedule):
    """Batched reverse-time rollout driven by pre-drawn noise.

    ``x_init`` is ``(n, d)``, ``noise`` is ``(n, T, d)``. Returns states
    ``(n, T + 1, d)`` and per-step log-probabilities ``(n, T)``.
    """
    x_init = np.asarray(x_init, dtype=float)
    n, d = x_init.shape
    if noise.shape != (n, grid.T, d):
        raise ContractViolation(f"noise shape {noise.shape} does not match ({n}, {grid.T}, {d})")
    states = np.empty((n, grid.T + 1, d))
    logps = np.empty((n, grid.T))
    states[:, 0] = x_init
    deterministic = sched.a == 0
    for i in range(grid.T):
        co = _coefficients(grid.T - i, grid, sched)
        x = states[:, i]
        mean = co.drift_x * x + co.drift_v * velocity(params, x, co.j)
        if deterministic:
            states[:, i + 1] = mean
            logps[:, i] = np.nan
            continue
        if co.variance <= 0:
            raise InvariantFailure(f"zero transition variance at j = {co.j} with a = {sched.a}")
        states[:, i + 1] = mean + np.sqrt(co.variance) * noise[:, i]
        logps[:, i] = _gaussian_logpdf(states[:, i + 1], mean, co.variance)
    return states, logps


def sample_trajectory(params: FlowPolicyParams, context: Context, grid: TimeGrid,
                      sched: NoiseSchedule, init_rng: np.random.Generator,
                      step_rng: np.random.Generator) -> Trajectory:
    x_init = init_rng.standard_normal(params.d)
    noise = step_rng.standard_normal((grid.T, params.d))
    states, logps = rollout(params, x_init[None], noise[None], grid, sched)
    return Trajectory(states[0], logps[0], noise, context.id)


def replay_trajectory(params: FlowPolicyParams, traj: Trajectory, grid: TimeGrid,
                      sched: NoiseSchedule) -> np.ndarray:
    """Recompute the states of ``traj`` from its initial latent and stored noise."""
    states, _ = rollout(params, traj.states[:1], traj.noise_draws[None], grid, sched)
    return states[0]


def step_log_probs_and_scores(params: FlowPolicyParams, states: np.ndarray,
                              grid: TimeGrid, sched: NoiseSchedule, return_features: bool = False):
    """Log-probabilities ``(n, T)`` and their gradients w.r.t. ``W`` ``(n, T, d, F)``.

    The mean is linear in ``W`` with coefficient ``drift_v * phi``, so the
    score of a step is ``drift_v * outer((x_next - mean) / variance, phi)``.
    With ``return_features`` the per-step feature matrices are returned too.
    """
    if states.ndim != 3 or states.shape[1] != grid.T + 1:
        raise ContractViolation("trajectories were not generated on this grid")
    n, _, d = states.shape
    logps = np.empty((n, grid.T))
    scores = np.empty((n, grid.T, d, params.F))
    feats = []
    for i in range(grid.T):
        co = _coefficients(grid.T - i, grid, sched)
        if co.variance <= 0:
            raise DomainError("transition variance is zero; log-density undefined (a = 0?)")
        x = states[:, i]
        phi = params.features(x, co.j)
        feats.append(phi)
        mean = co.drift_x * x + co.drift_v * (phi @ params.weights.T)
        logps[:, i] = _gaussian_logpdf(states[:, i + 1], mean, co.variance)
        resid = (states[:, i + 1] - mean) / co.variance
        scores[:, i] = co.drift_v * resid[:, :, None] * phi[:, None, :]
    if return_features:
        return logps, scores, feats
    return logps, scores


def _kl_factor(t: int, grid: TimeGrid, sched: NoiseSchedule) -> float:
    """Multiplier turning ``||v - v_ref||^2`` into the per-step KL."""
    co = _coefficients(t, grid, sched)
    if co.sigma2 <= 0:
        raise DomainError("closed-form KL needs a > 0")
    kappa = 1.0 + co.sigma2 * (1.0 - co.j) / (2.0 * float(sched.clamp(co.j)))
    return abs(grid.delta_j) / (2.0 * co.sigma2) * kappa ** 2


def _check_pair(params, ref_params, sched, ref_sched):
    if ref_sched is not None and ref_sched != sched:
        raise ContractViolation("closed-form KL requires both policies to share the noise schedule")
    if params.d != ref_params.d:
        raise ContractViolation("policies act on different state dimensions")


def kl_step(params: FlowPolicyParams, ref_params: FlowPolicyParams, x: np.ndarray,
            j_t: float, grid: TimeGrid, sched: NoiseSchedule,
            ref_sched: NoiseSchedule | None = None):
    """Closed-form ``KL(pi_theta || pi_ref)`` of the transition leaving ``x`` at ``j_t``."""
    _check_pair(params, ref_params, sched, ref_sched)
    t = grid.index_of(j_t)
    diff = velocity(params, x, grid.time(t)) - velocity(ref_params, x, grid.time(t))
    return _kl_factor(t, grid, sched) * np.sum(diff ** 2, axis=-1)


def kl_steps_batch(params: FlowPolicyParams, ref_params: FlowPolicyParams,
                   states: np.ndarray, grid: TimeGrid, sched: NoiseSchedule) -> np.ndarray:
    """Per-step KL for stacked trajectories ``(n, T + 1, d)``; returns ``(n, T)``."""
    if states.shape[1] != grid.T + 1:
        raise ContractViolation("trajectories were not generated on this grid")
    out = np.empty((states.shape[0], grid.T))
    for i in range(grid.T):
        t = grid.T - i
        j = grid.time(t)
        x = states[:, i]
        diff = velocity(params, x, j) - velocity(ref_params, x, j)
        out[:, i] = _kl_factor(t, grid, sched) * np.sum(diff ** 2, axis=-1)
    return out


def kl_trajectory(params: FlowPolicyParams, ref_params: FlowPolicyParams, traj: Trajectory,
                  grid: TimeGrid, sched: NoiseSchedule,
                  ref_sched: NoiseSchedule | None = None) -> float:
    _check_pair(params, ref_params, sched, ref_sched)
    if traj.states.shape[0] != grid.T + 1:
        raise ContractViolation(f"trajectory has {traj.states.shape[0] - 1} steps, grid has {grid.T}")
    return float(kl_steps_batch(params, ref_params, traj.states[None], grid, sched)[0].sum())


def kl_steps_and_grad(params: FlowPolicyParams, ref_params: FlowPolicyParams,
                      states: np.ndarray, grid: TimeGrid, sched: NoiseSchedule, features=None):
    """Per-step KL ``(n, T)`` and the gradient of its total w.r.t. ``W``.

    ``features`` may carry the policy's per-step feature matrices from an
    earlier pass over the same states.
    """
    if states.shape[1] != grid.T + 1:
        raise ContractViolation("trajectories were not generated on this grid")
    kl = np.empty((states.shape[0], grid.T))
    grad = np.zeros_like(params.weights)
    for i in range(grid.T):
        t = grid.T - i
        j = grid.time(t)
        x = states[:, i]
        phi = params.features(x, j) if features is None else features[i]
        diff = phi @ params.weights.T - velocity(ref_params, x, j)
        factor = _kl_factor(t, grid, sched)
        kl[:, i] = factor * np.sum(diff ** 2, axis=-1)
        grad += 2.0 * factor * diff.T @ phi
    return kl, grad
