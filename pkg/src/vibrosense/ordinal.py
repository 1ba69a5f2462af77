"""Ordinal fill-level targets, losses and estimators (numpy, float64)."""

from __future__ import annotations

import numpy as np

L_STANDARD = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
LEVELS = np.array(L_STANDARD)
SORD_SHARPNESS = 50.0
LOG_EPS = 1e-12


def sord_target(level: float, levels=LEVELS) -> np.ndarray:
    """Soft target ``q[j] ~ exp(-50 (level - L[j])^2)``, normalized."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"level {level} outside [0, 1]")
    z = -SORD_SHARPNESS * (level - np.asarray(levels, dtype=np.float64)) ** 2
    z -= z.max()
    q = np.exp(z)
    return q / q.sum()


def sord_loss(p_hat, q) -> float:
    """Cross-entropy ``-q . log(p_hat)`` with ``p_hat`` clamped at 1e-12."""
    p = np.maximum(np.asarray(p_hat, dtype=np.float64), LOG_EPS)
    return float(-np.dot(np.asarray(q, dtype=np.float64), np.log(p)))


def entropy(q) -> float:
    q = np.asarray(q, dtype=np.float64)
    nz = q > 0
    return float(-np.sum(q[nz] * np.log(q[nz])))


def map_estimate(p_hat, levels=LEVELS) -> float:
    """Level with the highest probability; ties go to the lower index."""
    return float(np.asarray(levels)[int(np.argmax(p_hat))])


def expect_estimate(p_hat, levels=LEVELS) -> float:
    return float(np.dot(np.asarray(levels, dtype=np.float64), np.asarray(p_hat, dtype=np.float64)))


def random_baseline_mae(levels=LEVELS) -> float:
    """Expected |L[i] - L[j]| for independent uniform true and predicted levels."""
    lv = np.asarray(levels, dtype=np.float64)
    return float(np.abs(lv[:, None] - lv[None, :]).mean())
