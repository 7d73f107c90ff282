"""Point and interval scoring against known truth."""

from __future__ import annotations

import numpy as np

from .exceptions import InvertedIntervalError, ShapeMismatchError


def _aligned(*arrays):
    arrs = [np.asarray(a, dtype=float) for a in arrays]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ShapeMismatchError(f"shapes differ: {[x.shape for x in arrs]}")
    return arrs


def rmse(estimates, truth, axis=0):
    """Root mean squared error over regions (``axis``); one value per response."""
    est, tru = _aligned(estimates, truth)
    if np.any(np.isnan(tru)):
        raise ShapeMismatchError("truth has missing cells")
    return np.sqrt(np.mean((est - tru) ** 2, axis=axis))


def interval_score(lower, upper, x, alpha=0.05, axis=0):
    """Mean interval score ``(u - l) + (2/alpha)(l - x)[x < l] + (2/alpha)(x - u)[x > u]``.

    Scalar inputs give the score itself.
    """
    lo, hi, x = _aligned(lower, upper, x)
    if np.any(lo > hi):
        raise InvertedIntervalError("lower bound exceeds upper bound")
    s = (hi - lo) + (2.0 / alpha) * (np.maximum(lo - x, 0.0) + np.maximum(x - hi, 0.0))
    return s.mean(axis=axis) if s.ndim else float(s)


def coverage(lower, upper, truth, axis=0):
    """Fraction of regions whose truth lies inside ``[lower, upper]``."""
    lo, hi, t = _aligned(lower, upper, truth)
    inside = (lo <= t) & (t <= hi)
    return inside.mean(axis=axis) if inside.ndim else float(inside)
