"""Batched tridiagonal solves.

Row ``i`` of each system reads ``lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]``;
``lower[..., 0]`` and ``upper[..., -1]`` are ignored.
"""

import numpy as np
from scipy.linalg import solve_banded


def solve_tridiagonal(lower, diag, upper, rhs):
    """Solve a batch of independent tridiagonal systems.

    Coefficient arrays have shape ``(..., m)``; ``rhs`` has shape ``(..., m)``
    or ``(..., m, k)``.  All lines are stacked into one banded system with
    the couplings across line junctions zeroed, so a single LAPACK call
    handles the whole batch.
    """
    diag = np.asarray(diag, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), diag.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), diag.shape)
    rhs = np.asarray(rhs, dtype=float)
    m = diag.shape[-1]
    batch = diag.shape[:-1]
    extra = rhs.shape[diag.ndim:]
    if rhs.shape[:diag.ndim] != diag.shape:
        raise ValueError(f"rhs shape {rhs.shape} does not match coefficients {diag.shape}")

    lo = lower.reshape(-1, m).copy()
    up = upper.reshape(-1, m).copy()
    lo[:, 0] = 0.0
    up[:, -1] = 0.0
    total = lo.size
    ab = np.zeros((3, total))
    ab[0, 1:] = up.ravel()[:-1]
    ab[1] = diag.ravel()
    ab[2, :-1] = lo.ravel()[1:]
    b = rhs.reshape((total,) + extra)
    x = solve_banded((1, 1), ab, b, overwrite_ab=True, check_finite=False)
    return x.reshape(batch + (m,) + extra)


def thomas(lower, diag, upper, rhs):
    """Plain Thomas algorithm for a single system; reference implementation."""
    n = len(diag)
    c = np.zeros(n)
    d = np.zeros(n)
    c[0] = upper[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        den = diag[i] - lower[i] * c[i - 1]
        c[i] = upper[i] / den if i < n - 1 else 0.0
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den
    x = np.zeros(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x
