"""Independent reference computations used by the tests."""

import math

import numpy as np


def sphere_spans(vectors, directions=100_000, seed=0):
    """Brute force: every sampled unit direction has a positive dot product with some vector."""
    a = np.asarray(vectors, float)
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(directions, a.shape[1]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    best = np.full(directions, -np.inf)
    for v in a:
        best = np.maximum(best, d @ v)
    return bool(np.min(best) > 0)


def random_vector_sets(count, dim, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        m = int(rng.integers(2, 2 * dim + 3))
        out.append(rng.normal(size=(m, dim)))
    return out


def heat_exact(t, x, horizon=1.0):
    return np.exp(-(horizon - t) / 2.0) * np.sin(x)


def heat_gradient(t, x, horizon=1.0):
    return np.exp(-(horizon - t) / 2.0) * np.cos(x)


def gaussian_abs_moment(alpha, var):
    """E|N(0, var)|^alpha."""
    return var ** (alpha / 2) * 2 ** (alpha / 2) * math.gamma((alpha + 1) / 2) / math.sqrt(math.pi)
