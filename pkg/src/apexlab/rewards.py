"""Synthetic heterogeneous terminal rewards.

One discrete indicator objective (high dispersion, OCR-like) and smooth
low-dispersion objectives whose optima disagree, so that no single terminal
state maximises everything and gradient conflicts appear on part of the
state space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .flowmatch import Context, Mode

KINDS = ("discrete_region", "smooth_radial", "directional", "ridge")

# Per-objective upper bounds of the four-objective image benchmark
# (OCR, PickScore, DeQA, Aesthetic), in normalized units.
BENCHMARK_UTOPIA = (0.92, 0.90, 0.86, 0.62)

UTOPIA_WINDOW = 50

_REQUIRED = {
    "discrete_region": ("center", "radius", "payoff"),
    "smooth_radial": ("center", "bandwidth"),
    "directional": ("direction", "scale"),
    "ridge": ("axis", "width"),
}


@dataclass(eq=False)
class RewardSpec:
    """One bounded reward ``R_k(x0) in [0, r_max]``.

    ``params`` holds the kind-specific geometry:

    * ``discrete_region``: ``center``, ``radius``, ``payoff``
    * ``smooth_radial``: ``center``, ``bandwidth``
    * ``directional``: ``direction`` (normalised when evaluated), ``scale``
    * ``ridge``: ``axis`` (normalised), ``width`` and optional ``offset``
    """

    kind: str
    params: Mapping[str, object] = field(default_factory=dict)
    r_max: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown reward kind {self.kind!r}; expected one of {KINDS}")
        if not (math.isfinite(self.r_max) and self.r_max > 0):
            raise ConfigError(f"r_max must be positive, got {self.r_max!r}")
        missing = [k for k in _REQUIRED[self.kind] if k not in self.params]
        if missing:
            raise ConfigError(f"{self.kind} reward is missing {missing}")
        p = dict(self.params)
        for key in ("center", "direction", "axis", "offset"):
            if key in p:
                p[key] = np.asarray(p[key], dtype=float)
        self._unit = {}
        for key in ("direction", "axis"):
            if key in p:
                norm = np.linalg.norm(p[key])
                if norm == 0:
                    raise ConfigError(f"{key} must be nonzero")
                self._unit[key] = p[key] / norm
        for key in ("radius", "bandwidth", "scale", "width"):
            if key in p and not float(p[key]) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.kind == "discrete_region" and not 0 < float(p["payoff"]) <= self.r_max:
            raise ConfigError("payoff must lie in (0, r_max]")
        self.params = p
        if not self.name:
            self.name = self.kind

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Evaluate on frame coordinates ``z`` of shape ``(n, d)``."""
        p = self.params
        if self.kind == "discrete_region":
            hit = np.linalg.norm(z - p["center"], axis=-1) <= float(p["radius"])
            return float(p["payoff"]) * hit.astype(float)
        if self.kind == "smooth_radial":
            sq = np.sum((z - p["center"]) ** 2, axis=-1)
            return self.r_max * np.exp(-sq / (2.0 * float(p["bandwidth"]) ** 2))
        if self.kind == "directional":
            s = 0.5 + 0.5 * (z @ self._unit["direction"]) / float(p["scale"])
            return self.r_max * np.clip(s, 0.0, 1.0)
        # ridge: squared distance to the line offset + s * axis
        rel = z - p.get("offset", 0.0)
        along = rel @ self._unit["axis"]
        sq = np.maximum(np.sum(rel ** 2, axis=-1) - along ** 2, 0.0)
        return self.r_max * np.exp(-sq / (2.0 * float(p["width"]) ** 2))


def _frames(context: Context, K: int):
    modes = context.target_modes
    if len(modes) == 1:
        return modes * K
    if len(modes) != K:
        raise ConfigError(f"context {context.id} has {len(modes)} modes for {K} objectives")
    return modes


def evaluate_rewards_batch(x0: np.ndarray, context: Context,
                           specs: Sequence[RewardSpec]) -> np.ndarray:
    """Rewards for terminal states ``(n, d)``; returns ``(n, K)``."""
    if len(specs) < 2:
        raise ConfigError("at least two objectives are required")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if not np.all(np.isfinite(x0)):
        raise DomainError("terminal states contain non-finite values")
    out = np.empty((x0.shape[0], len(specs)))
    for k, (spec, mode) in enumerate(zip(specs, _frames(context, len(specs)))):
        z = (x0 - np.asarray(mode.center, dtype=float)) / mode.scale
        out[:, k] = spec(z)
    return out


def evaluate_rewards(x0: np.ndarray, context: Context, specs: Sequence[RewardSpec]) -> np.ndarray:
    """Reward vector of length K for a single terminal state."""
    return evaluate_rewards_batch(np.asarray(x0, dtype=float)[None], context, specs)[0]


def batch_running_performance(reward_batches) -> np.ndarray:
    """Elementwise mean over every reward vector in the batch (all B * G samples)."""
    arr = np.asarray(reward_batches, dtype=float)
    if arr.size == 0:
        raise DomainError("running performance of an empty batch is undefined")
    return arr.reshape(-1, arr.shape[-1]).mean(axis=0)


@dataclass(frozen=True)
class UtopiaPoints:
    u: tuple[float, ...]
    source: str = "configured"

    def __post_init__(self):
        if self.source not in ("configured", "specialist_run"):
            raise ConfigError(f"unknown utopia source {self.source!r}")
        if any(not (math.isfinite(v) and v > 0) for v in self.u):
            raise ConfigError(f"utopia points must be positive, got {self.u}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.u, dtype=float)


def benchmark_utopia() -> UtopiaPoints:
    return UtopiaPoints(BENCHMARK_UTOPIA, "configured")


def estimate_utopia(specialist_histories: Sequence[Sequence[float]], window: int = UTOPIA_WINDOW,
                    floor: Sequence[float] | None = None) -> UtopiaPoints:
    """Best sliding-window mean of each specialist's reward trace.

    Traces shorter than ``window`` use their overall mean. ``floor``, when
    given, is an elementwise lower bound on the result.
    """
    u = []
    for k, trace in enumerate(specialist_histories):
        trace = np.asarray(trace, dtype=float)
        if trace.size == 0:
            raise DomainError(f"specialist trace for objective {k} is empty")
        w = min(window, trace.size)
        means = np.convolve(trace, np.ones(w) / w, mode="valid")
        u.append(float(means.max()))
    if floor is not None:
        u = [max(a, float(b)) for a, b in zip(u, floor)]
    return UtopiaPoints(tuple(u), "specialist_run")


def default_benchmark_specs() -> list[RewardSpec]:
    """The default four-objective heterogeneous benchmark.

    Objective 0 is a discrete hit-or-miss region with unit payoff. The three
    smooth objectives have small ranges (like image-quality scores that move
    within a narrow band) and optima pulling in different directions.
    """
    return [
        RewardSpec("discrete_region", {"center": (0.8, 1.2), "radius": 1.0, "payoff": 1.0},
                   r_max=1.0, name="region"),
        RewardSpec("smooth_radial", {"center": (0.5, 2.5), "bandwidth": 2.0},
                   r_max=0.05, name="radial"),
        RewardSpec("ridge", {"axis": (1.0, 0.0), "width": 1.5, "offset": (0.0, 1.5)},
                   r_max=0.05, name="ridge"),
        RewardSpec("directional", {"direction": (-1.0, 0.6), "scale": 4.0},
                   r_max=0.05, name="directional"),
    ]


def default_contexts(n: int = 16, spread: float = 0.2, seed: int = 123) -> list[Context]:
    """A fixed pool of single-mode contexts with centers jittered around the origin."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(n, 2))
    return [Context(i, (Mode(tuple(c), 1.0),)) for i, c in enumerate(centers)]
