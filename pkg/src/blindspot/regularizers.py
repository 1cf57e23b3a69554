"""Spectral penalties on the classifier head and a finite-difference checker.

Both penalties use the derivative of a simple singular value,
``d sigma_i / d W = u_i v_i^T``. When the relevant singular value is repeated
that formula gives one element of the subdifferential.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .linalg import DEFAULT_REL_TOL, as_matrix, sigma_extremes, svd

NEAR_SINGULAR_RATIO = 1e-8
_TIE_RTOL = 1e-8


@dataclass(frozen=True)
class PenaltyValue:
    value: float
    grad: np.ndarray
    near_singular: bool = False


def lsv_penalty(w, rel_tol: float = DEFAULT_REL_TOL) -> PenaltyValue:
    """``1 / sigma_min(w)`` and its gradient ``-u_min v_min^T / sigma_min**2``."""
    w = as_matrix(w)
    ext = sigma_extremes(svd(w), rel_tol)
    smin = ext.sigma_min
    grad = -np.outer(ext.u_min, ext.v_min) / smin**2
    return PenaltyValue(1.0 / smin, grad, smin < NEAR_SINGULAR_RATIO * ext.sigma_max)


def cn_penalty(w, rel_tol: float = DEFAULT_REL_TOL) -> PenaltyValue:
    """Condition number ``sigma_max / sigma_min`` over the non-zero spectrum."""
    w = as_matrix(w)
    ext = sigma_extremes(svd(w), rel_tol)
    smin, smax = ext.sigma_min, ext.sigma_max
    grad = np.outer(ext.u_max, ext.v_max) / smin - (smax / smin**2) * np.outer(ext.u_min, ext.v_min)
    return PenaltyValue(smax / smin, grad, smin < NEAR_SINGULAR_RATIO * smax)


@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    n_skipped: int
    degenerate: bool


def _is_degenerate(w: np.ndarray, rel_tol: float) -> bool:
    s = svd(w)
    ext = sigma_extremes(s, rel_tol)
    sig = s.sigma[: ext.rank]
    if ext.rank < 2:
        return False
    near = lambda a, b: abs(a - b) <= _TIE_RTOL * ext.sigma_max
    return near(sig[0], sig[1]) or near(sig[-1], sig[-2])


def finite_diff_check(penalty_fn: Callable[[np.ndarray], PenaltyValue], w, step: float = 1e-6,
                      rel_tol: float = DEFAULT_REL_TOL) -> FiniteDiffReport:
    """Compare ``penalty_fn(w).grad`` with central differences entry by entry.

    The relative error is taken over entries whose analytic gradient exceeds
    1e-8 in magnitude. When the extreme singular values are repeated the
    penalty is not differentiable; entries whose forward and backward
    quotients disagree are then skipped instead of being compared with the
    subgradient.
    """
    if not 1e-8 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-8, 1e-3]")
    w = as_matrix(w)
    base = penalty_fn(w)
    f0 = base.value
    degenerate = _is_degenerate(w, rel_tol)
    max_rel = max_abs = 0.0
    checked = skipped = 0
    for idx in np.ndindex(w.shape):
        wp = w.copy()
        wp[idx] += step
        fp = penalty_fn(wp).value
        wp[idx] = w[idx] - step
        fm = penalty_fn(wp).value
        if degenerate:
            fwd = (fp - f0) / step
            bwd = (f0 - fm) / step
            if abs(fwd - bwd) > 1e-3 * max(1.0, abs(fwd), abs(bwd)):
                skipped += 1
                continue
        numeric = (fp - fm) / (2.0 * step)
        analytic = base.grad[idx]
        err = abs(analytic - numeric)
        max_abs = max(max_abs, err)
        if abs(analytic) > 1e-8:
            max_rel = max(max_rel, err / abs(analytic))
            checked += 1
    return FiniteDiffReport(max_rel, max_abs, checked, skipped, degenerate)
