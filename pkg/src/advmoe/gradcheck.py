"""Finite-difference verification of reverse-mode gradients."""

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import backward

# Relative error floor: coordinates where both gradients are below this
# magnitude are compared at the floor scale instead (FD noise dominates
# genuine near-zero gradients).
_SCALE_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    passed: bool


def grad_check(forward_fn, params, tolerance: float = 1e-5, n_coords: int = 50,
               h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``forward_fn()`` must rebuild the scalar loss from the current values
    of ``params`` (float64 throughout). A random subsample of at least
    ``n_coords`` coordinates across all parameters is probed. Failures are
    reported, never raised.
    """
    loss = forward_fn()
    analytic = backward(loss, params=list(params))

    rng = RngStream(seed, "gradcheck").generator()
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    n = min(max(n_coords, 50), total)
    flat_picks = np.sort(rng.choice(total, size=n, replace=False))

    bounds = np.concatenate([[0], np.cumsum(sizes)])
    max_err = 0.0
    for flat in flat_picks:
        pi = int(np.searchsorted(bounds, flat, side="right") - 1)
        offset = int(flat - bounds[pi])
        p = params[pi]
        idx = np.unravel_index(offset, p.data.shape)
        orig = p.data[idx]

        p.data[idx] = orig + h
        f_plus = float(forward_fn().data)
        p.data[idx] = orig - h
        f_minus = float(forward_fn().data)
        p.data[idx] = orig

        numeric = (f_plus - f_minus) / (2 * h)
        a = float(analytic[p][idx])
        scale = max(abs(a), abs(numeric), _SCALE_FLOOR)
        max_err = max(max_err, abs(a - numeric) / scale)

    return GradCheckReport(max_rel_err=max_err, n_coords=n, passed=max_err < tolerance)
