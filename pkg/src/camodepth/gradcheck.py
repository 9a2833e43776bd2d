"""Finite-difference and brute-force oracles used by the test suites.

Nothing here imports the implementations it is meant to check.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    step: float
    nonfinite: list[int]

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error <= self.tolerance


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate.

    Returns ``(grad, nonfinite)`` where ``nonfinite`` lists flat indices whose
    perturbed evaluations were not finite (their gradient entry is NaN).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty(x.size)
    bad = []
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(i)
            grad[i] = np.nan
        else:
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape), bad


def compare_gradients(analytic, numeric, tolerance: float, step: float, nonfinite=(), floor: float | None = None):
    """Relative error ``|a - n| / max(|a|, |n|, floor)`` maximized over coordinates.

    ``floor`` defaults to 1e-3 of the largest gradient magnitude so that
    near-zero entries are judged on an absolute scale.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if floor is None:
        floor = 1e-3 * max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-300)
    diff = np.abs(a - n)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    rel = diff / denom
    ok = np.isfinite(rel)
    return GradCheckReport(
        max_rel_error=float(rel[ok].max(initial=0.0)),
        max_abs_error=float(diff[ok].max(initial=0.0)),
        tolerance=tolerance,
        step=step,
        nonfinite=list(nonfinite),
    )


def check_gradient(f, x, analytic_grad, tolerance: float, h: float = 1e-6, floor: float | None = None) -> GradCheckReport:
    numeric, bad = finite_diff_grad(f, x, h)
    return compare_gradients(analytic_grad, numeric, tolerance, h, bad, floor)


class UndefinedMetric(ValueError):
    pass


def brute_force_metrics(d_adv, d_benign, mask, v_thre: float = 10.0) -> tuple[float, float]:
    """Per-pixel scalar loops for mean depth error and affected-region ratio."""
    d_adv = np.asarray(d_adv, dtype=np.float64)
    d_benign = np.asarray(d_benign, dtype=np.float64)
    mask = np.asarray(mask)
    rows, cols = mask.shape
    total = 0.0
    hits = 0
    area = 0
    for i in range(rows):
        for j in range(cols):
            if mask[i, j]:
                delta = abs(float(d_adv[i, j]) - float(d_benign[i, j]))
                total += delta
                area += 1
                if delta >= v_thre:
                    hits += 1
    if area == 0:
        raise UndefinedMetric("empty mask")
    return total / area, hits / area
