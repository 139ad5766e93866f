"""Dual-stage advantage normalization and the weight-then-normalize baseline.

All statistics are per group (one context's G rollouts) and use the
population standard deviation. A zero-dispersion input maps to all zeros
rather than being amplified by ``1 / eps``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DomainError

EPS = 1e-8


@dataclass(frozen=True)
class AdvantageMatrix:
    stage1: np.ndarray            # (G, K)
    aggregated: np.ndarray        # (G,) weighted sum before re-normalization
    final: np.ndarray             # (G,)
    pre_norm_variance: float


def _standardize(v: np.ndarray, eps: float, axis: int = 0) -> np.ndarray:
    mean = v.mean(axis=axis, keepdims=True)
    std = v.std(axis=axis, keepdims=True)
    out = (v - mean) / (std + eps)
    flat = np.ptp(v, axis=axis, keepdims=True) == 0
    return np.where(flat, 0.0, out)


def _as_rewards(rewards) -> np.ndarray:
    R = np.asarray(rewards, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    if R.ndim != 2:
        raise ContractViolation(f"rewards must be a G x K matrix, got shape {R.shape}")
    if R.shape[0] < 2:
        raise DomainError("group statistics need at least two members")
    if not np.all(np.isfinite(R)):
        raise DomainError("rewards contain non-finite values")
    return R


def _check_weights(weights, K: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (K,):
        raise ContractViolation(f"expected {K} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ContractViolation(f"weights are not on the simplex: {w}")
    return w


def stage1_standardize(rewards, eps: float = EPS) -> np.ndarray:
    """Column-wise ``(r - mean) / (std + eps)`` over the group."""
    return _standardize(_as_rewards(rewards), eps)


def stage2_aggregate(stage1, weights, eps: float = EPS) -> tuple[np.ndarray, float]:
    """Weighted sum of standardized columns, re-standardized.

    Returns ``(final, pre_norm_variance)`` where the variance is that of the
    weighted sum before the second standardization.
    """
    A = _as_rewards(stage1)
    V = A @ _check_weights(weights, A.shape[1])
    return _standardize(V, eps), float(V.var())


def dsan_advantages(rewards, weights, eps: float = EPS) -> AdvantageMatrix:
    A = stage1_standardize(rewards, eps)
    V = A @ _check_weights(weights, A.shape[1])
    return AdvantageMatrix(A, V, _standardize(V, eps), float(V.var()))


def naive_weight_then_normalize(rewards, weights, eps: float = EPS) -> np.ndarray:
    """Scalarize raw rewards first, then standardize once."""
    R = _as_rewards(rewards)
    return _standardize(R @ _check_weights(weights, R.shape[1]), eps)
