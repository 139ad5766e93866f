"""Pareto domination, hypervolume and the improvement indicators built on them.

All objectives are maximized. Hypervolume is the Lebesgue measure of the
union of boxes ``[ref, a]``; coordinates at or below the reference contribute
nothing.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, DomainError

OBJECTIVES = ("OCR", "PickScore", "DeQA", "Aesthetic")
R_BASE = (0.59, 0.835, 0.814, 0.539)
R_EARLY = (0.38, 0.81, 0.60, 0.50)
NORMALIZATION = (1.0, 26.0, 5.0, 10.0)

# Raw benchmark scores (OCR, PickScore, DeQA, Aesthetic) of the four
# image-model runs the product indicator is usually quoted for.
BENCHMARK_ROWS = {
    "apex": (0.83, 23.03, 4.42, 5.92),
    "static": (0.88, 22.62, 4.24, 5.51),
    "pickscore_only": (0.69, 23.53, 4.22, 5.92),
    "ocr_only": (0.92, 22.44, 4.06, 5.32),
}


@dataclass(frozen=True)
class NormalizationSpec:
    divisors: tuple[float, ...] = NORMALIZATION

    def __post_init__(self):
        if any(not d > 0 for d in self.divisors):
            raise ContractViolation(f"normalization divisors must be positive: {self.divisors}")

    def apply(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        if raw.shape[-1] != len(self.divisors):
            raise ContractViolation(f"{raw.shape[-1]} objectives for {len(self.divisors)} divisors")
        return raw / np.asarray(self.divisors)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractViolation(f"points of different dimension: {a.shape} vs {b.shape}")
    return a, b


def dominates(a, b) -> bool:
    a, b = _pair(a, b)
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_mask(points) -> np.ndarray:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[0] == 0:
        raise DomainError("Pareto filter of an empty set")
    ge = np.all(P[:, None, :] >= P[None, :, :], axis=2)
    gt = np.any(P[:, None, :] > P[None, :, :], axis=2)
    dominated = np.any(ge & gt, axis=0)   # column j dominated by some row i
    return ~dominated


def pareto_filter(points) -> np.ndarray:
    """Non-dominated rows, in input order. Duplicates of a non-dominated point are kept."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    return P[pareto_mask(P)]


def _clip_to_ref(points, ref) -> tuple[np.ndarray, np.ndarray]:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.asarray(ref, dtype=float)
    if P.size == 0:
        return np.empty((0, r.size)), r
    if P.shape[1] != r.size:
        raise ContractViolation(f"points have {P.shape[1]} objectives, reference has {r.size}")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(r))):
        raise DomainError("hypervolume inputs must be finite")
    P = np.maximum(P, r)
    return P[np.all(P > r, axis=1)], r


def _hv2(P: np.ndarray, r: np.ndarray) -> float:
    order = np.argsort(-P[:, 0], kind="stable")
    xs, ys = P[order, 0], P[order, 1]
    area, ymax = 0.0, r[1]
    for i in range(len(xs)):
        ymax = max(ymax, ys[i])
        nxt = xs[i + 1] if i + 1 < len(xs) else r[0]
        area += (xs[i] - nxt) * (ymax - r[1])
    return area


def _hv(P: np.ndarray, r: np.ndarray) -> float:
    if P.shape[0] == 0:
        return 0.0
    k = P.shape[1]
    if k == 1:
        return float(P[:, 0].max() - r[0])
    if k == 2:
        return _hv2(P, r)
    P = P[np.argsort(-P[:, -1], kind="stable")]
    vol = 0.0
    for i in range(P.shape[0]):
        nxt = P[i + 1, -1] if i + 1 < P.shape[0] else r[-1]
        h = P[i, -1] - nxt
        if h > 0:
            vol += h * _hv(pareto_filter(P[:i + 1, :-1]), r[:-1])
    return vol


def hypervolume_exact(points, ref) -> float:
    """Exact hypervolume by recursive dimension sweep with a 2-D staircase base case."""
    P, r = _clip_to_ref(points, ref)
    if P.shape[0] == 0:
        return 0.0
    return float(_hv(pareto_filter(P), r))


def hypervolume_mc(points, ref, n_samples: int = 100_000, seed: int = 0,
                   chunk: int = 50_000) -> tuple[float, float]:
    """Monte Carlo hypervolume: ``(estimate, standard_error)``."""
    P, r = _clip_to_ref(points, ref)
    if P.shape[0] == 0:
        return 0.0, 0.0
    hi = P.max(axis=0)
    box = float(np.prod(hi - r))
    if box <= 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        u = rng.uniform(r, hi, size=(m, r.size))
        covered = np.zeros(m, dtype=bool)
        for p in P:
            covered |= np.all(u <= p, axis=1)
        hits += int(covered.sum())
        done += m
    frac = hits / n_samples
    return box * frac, box * np.sqrt(frac * (1.0 - frac) / n_samples)


def product_improvement_hv(model, base) -> float:
    """Volume of the single box between ``base`` and ``model``; zero if any objective regressed."""
    m, b = _pair(model, base)
    diff = m - b
    if np.any(diff <= 0):
        return 0.0
    return float(np.prod(diff))


def benchmark_product_hv(row: str) -> float:
    """Product indicator of one of the stored benchmark rows against ``R_BASE``."""
    norm = NormalizationSpec().apply(BENCHMARK_ROWS[row])
    return product_improvement_hv(norm, R_BASE)


def window_means(reward_log, window: int = 50) -> np.ndarray:
    """Means over non-overlapping windows; a trailing partial window is dropped."""
    R = np.asarray(reward_log, dtype=float)
    n = R.shape[0] // window
    return R[:n * window].reshape(n, window, R.shape[1]).mean(axis=1)


def windowed_cumulative_hv(reward_log, ref, window: int = 50,
                           divisors: Sequence[float] | None = None) -> np.ndarray:
    """Hypervolume of the Pareto set of all window means seen so far.

    ``reward_log`` is ``(steps, K)``; ``divisors`` normalize the window means
    before comparison with ``ref``. Returns ``(n_windows, 2)`` rows of
    ``(window_index, hv)``.
    """
    if window < 1:
        raise ContractViolation("window must be positive")
    R = np.asarray(reward_log, dtype=float)
    if R.ndim != 2 or R.shape[0] < window:
        warnings.warn(f"reward log of {R.shape[0] if R.ndim else 0} steps is shorter than "
                      f"one window of {window}; no hypervolume series", stacklevel=2)
        return np.empty((0, 2))
    means = window_means(R, window)
    if divisors is not None:
        means = means / np.asarray(divisors, dtype=float)
    out = np.empty((means.shape[0], 2))
    for i in range(means.shape[0]):
        out[i] = i, hypervolume_exact(means[:i + 1], ref)
    return out


def write_points(path, points, names: Sequence[str]) -> None:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[1] != len(names):
        raise ContractViolation("one header name per objective is required")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in P:
            w.writerow([repr(float(v)) for v in row])


def read_points(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DomainError(f"{path} is empty")
    names, body = rows[0], rows[1:]
    return names, np.array([[float(v) for v in r] for r in body]).reshape(-1, len(names))
