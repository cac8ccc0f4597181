"""Error metrics on the evaluation grid."""

import numpy as np

from .errors import MetricError
from .fields import GridField


def _values(a):
    return a.values if isinstance(a, GridField) else np.asarray(a, dtype=np.float64)


def relative_l2(pred, ref):
    """sqrt(sum (pred - ref)^2) / sqrt(sum ref^2); both on the same grid."""
    if isinstance(pred, GridField) and isinstance(ref, GridField):
        if not np.array_equal(pred.grid, ref.grid):
            raise MetricError("prediction and reference live on different grids")
    p, r = _values(pred), _values(ref)
    if p.shape != r.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {r.shape}")
    norm = np.sqrt(np.sum(r * r))
    if norm == 0.0:
        raise MetricError("relative error undefined for a zero reference")
    return float(np.sqrt(np.sum((p - r) ** 2)) / norm)


def relative_l2_rows(pred, ref):
    """Row-wise relative L2 errors of two (n_rows, n_points) arrays."""
    p, r = np.atleast_2d(pred), np.atleast_2d(ref)
    return np.array([relative_l2(a, b) for a, b in zip(p, r)])


def sign_aligned(pred, ref):
    """``pred`` or ``-pred``, whichever is closer to ``ref``; returns ``(curve, flipped)``."""
    p, r = _values(pred), _values(ref)
    flip = np.sum((p + r) ** 2) < np.sum((p - r) ** 2)
    return (-p if flip else p), bool(flip)


def mode_errors(pred_modes, ref_modes):
    """Sign-aligned relative errors of matching mode curves; also the flip flags."""
    errors, flips = [], []
    for p, r in zip(np.atleast_2d(pred_modes), np.atleast_2d(ref_modes)):
        aligned, flip = sign_aligned(p, r)
        errors.append(relative_l2(aligned, r))
        flips.append(flip)
    return errors, flips
