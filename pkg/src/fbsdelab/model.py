"""Problem data for the two parabolic systems and the FBSDE, plus the
driver transforms (truncation, mollification) used to build approximating
problems.

Callback contract
-----------------
Every callback is vectorised over a leading batch axis of length ``N``:

* ``t``: ``(N,)``
* ``x``: ``(N, d)``
* ``u`` / ``y``: ``(N, n)``
* ``p`` / ``z``: ``(N, n, d)`` -- row ``i`` is the gradient of component ``i``

``sigma(t, x, u)`` returns ``(N, d, d)`` in System1 mode and
``sigma(t, x, u, p)`` returns ``(N,)`` in System2 mode (``d = 1``).
``driver(t, x, u, p)`` returns ``(N, n)`` and ``terminal(x)`` returns
``(N, n)``.  Callbacks must be pure; they may be called concurrently.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import CallbackFailure, DimensionMismatch, QuadratureBudgetExceeded

Array = np.ndarray


class Mode(enum.Enum):
    SYSTEM1 = "system1"
    SYSTEM2 = "system2"


def _shaped(out, shape: tuple, name: str) -> Array:
    out = np.asarray(out, dtype=float)
    if out.shape == shape:
        return out
    try:
        return np.array(np.broadcast_to(out, shape))
    except ValueError:
        # (N,) for a d=1 matrix or an n=1 vector is a common shorthand
        if out.size == math.prod(shape):
            return out.reshape(shape)
        raise DimensionMismatch(f"{name} returned shape {out.shape}, expected {shape}") from None


@dataclass(frozen=True)
class FbsdeSpec:
    """Data (H, Sigma, F, G) of the coupled forward-backward system.

    ``drift(t, x, y, z) -> (N, d)``, ``diffusion(t, x, y) -> (N, d, d)``,
    ``generator(t, x, y, z) -> (N, n)``, ``terminal(x) -> (N, n)``.
    """

    dim_x: int
    dim_y: int
    horizon: float
    drift: Callable
    diffusion: Callable
    generator: Callable
    terminal: Callable
    x0: tuple = (0.0,)
    t0: float = 0.0

    def __post_init__(self):
        if len(self.x0) != self.dim_x:
            raise DimensionMismatch(f"x0 has length {len(self.x0)}, expected {self.dim_x}")

    def eval_diffusion(self, t, x, y) -> Array:
        n = len(t)
        return _shaped(self.diffusion(t, x, y), (n, self.dim_x, self.dim_x), "diffusion")

    def eval_drift(self, t, x, y, z) -> Array:
        return _shaped(self.drift(t, x, y, z), (len(t), self.dim_x), "drift")

    def eval_generator(self, t, x, y, z) -> Array:
        return _shaped(self.generator(t, x, y, z), (len(t), self.dim_y), "generator")

    def eval_terminal(self, x) -> Array:
        return _shaped(self.terminal(x), (len(x), self.dim_y), "terminal")


@dataclass(frozen=True)
class ProblemSpec:
    dim_x: int
    dim_u: int
    horizon: float
    sigma: Callable
    driver: Callable
    terminal: Callable
    mode: Mode = Mode.SYSTEM1
    # set by fbsde.translate so the forward simulation can restore the drift
    source: FbsdeSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_u < 1:
            raise DimensionMismatch("dimensions must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.mode is Mode.SYSTEM2 and self.dim_x != 1:
            raise DimensionMismatch("System2 mode requires d = 1")

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)

    def eval_sigma(self, t, x, u, p=None) -> Array:
        n = len(t)
        if self.mode is Mode.SYSTEM2:
            return _shaped(self.sigma(t, x, u, p), (n,), "sigma")
        return _shaped(self.sigma(t, x, u), (n, self.dim_x, self.dim_x), "sigma")

    def sigma_matrix(self, t, x, u, p=None) -> Array:
        """Diffusion matrix as ``(N, d, d)`` in either mode."""
        s = self.eval_sigma(t, x, u, p)
        return s.reshape(-1, 1, 1) if self.mode is Mode.SYSTEM2 else s

    def diffusion(self, t, x, u, p=None) -> Array:
        """a = sigma sigma^T / 2, shape ``(N, d, d)``."""
        s = self.sigma_matrix(t, x, u, p)
        return 0.5 * np.einsum("nij,nkj->nik", s, s)

    def eval_driver(self, t, x, u, p) -> Array:
        return _shaped(self.driver(t, x, u, p), (len(t), self.dim_u), "driver")

    def eval_terminal(self, x) -> Array:
        return _shaped(self.terminal(x), (len(x), self.dim_u), "terminal")


@dataclass(frozen=True)
class DriverSplit:
    """Split ``f^i = p^i . b0 + b^i`` used by the a-priori bound hypotheses."""

    b0: Callable
    b: Callable

    def eval(self, t, x, u, p, dim_x: int, dim_u: int) -> tuple[Array, Array]:
        n = len(t)
        return (_shaped(self.b0(t, x, u, p), (n, dim_x), "b0"),
                _shaped(self.b(t, x, u, p), (n, dim_u), "b"))


def _identity(s):
    return s


@dataclass(frozen=True)
class HypothesisConstants:
    c_sigma: float = 1.0
    l_sigma: float = 0.0
    c_f: float = 0.0
    c_q: float = 0.0
    epsilon_bf: float = 0.5
    alpha0: float = 0.5
    m_ab: float = 0.0
    rho_ab: float = 0.0
    spanning_set: tuple = ()
    kappa: Callable = _identity

    def __post_init__(self):
        if not 0 < self.epsilon_bf < 1:
            raise ValueError("epsilon_bf must lie in (0, 1)")
        if not 0 < self.alpha0 < 1:
            raise ValueError("alpha0 must lie in (0, 1)")
        if self.c_sigma < 1:
            raise ValueError("c_sigma must be at least 1")
        if min(self.l_sigma, self.c_f, self.c_q, self.m_ab, self.rho_ab) < 0:
            raise ValueError("constants must be nonnegative")


@dataclass(frozen=True)
class SamplePoints:
    t: Array
    x: Array
    u: Array
    p: Array

    def __len__(self) -> int:
        return len(self.t)

    def row(self, i: int) -> dict:
        return {"t": float(self.t[i]), "x": self.x[i].tolist(),
                "u": self.u[i].tolist(), "p": self.p[i].tolist()}

    def take(self, idx) -> "SamplePoints":
        return SamplePoints(self.t[idx], self.x[idx], self.u[idx], self.p[idx])


def _cube_points(dim: int, count: int, center: Array, half: Array) -> Array:
    """Deterministic low-discrepancy points in a box, plus centre and face midpoints."""
    if dim == 1:
        return (center + half * np.linspace(-1.0, 1.0, max(count, 2))).reshape(-1, 1)
    unit = qmc.Halton(dim, scramble=False).random(count)
    pts = [center + half * (2.0 * unit - 1.0), center[None, :]]
    for j in range(dim):
        for s in (-1.0, 1.0):
            e = center.copy()
            e[j] += s * half[j]
            pts.append(e[None, :])
    return np.vstack(pts)


@dataclass(frozen=True)
class SamplingBox:
    """Finite surrogate for the "for all (t, x, u, p)" quantifiers.

    ``u`` and ``p`` range over max-norm cubes of the given radii.
    """

    x_lo: tuple
    x_hi: tuple
    u_radius: float = 1.0
    p_radius: float = 2.0
    t_count: int = 3
    x_count: int = 5
    u_count: int = 9
    p_count: int = 41

    def __post_init__(self):
        if len(self.x_lo) != len(self.x_hi):
            raise DimensionMismatch("x_lo and x_hi differ in length")
        if not all(lo < hi for lo, hi in zip(self.x_lo, self.x_hi)):
            raise ValueError("x_lo must be below x_hi componentwise")
        if min(self.t_count, self.x_count, self.u_count, self.p_count) < 2:
            raise ValueError("sample budgets must be at least 2")
        if not (self.u_radius > 0 and self.p_radius > 0):
            raise ValueError("radii must be positive")

    @property
    def dim(self) -> int:
        return len(self.x_lo)

    def x_points(self) -> Array:
        lo, hi = np.asarray(self.x_lo, float), np.asarray(self.x_hi, float)
        return _cube_points(self.dim, self.x_count, (lo + hi) / 2, (hi - lo) / 2)

    def u_points(self, n: int, radius: float | None = None) -> Array:
        r = self.u_radius if radius is None else radius
        return _cube_points(n, self.u_count, np.zeros(n), np.full(n, r))

    def p_points(self, n: int, d: int, radius: float | None = None) -> Array:
        r = self.p_radius if radius is None else radius
        pts = _cube_points(n * d, self.p_count, np.zeros(n * d), np.full(n * d, r))
        return pts.reshape(-1, n, d)

    def points(self, dim_u: int, horizon: float, *, u_radius: float | None = None,
               p_radius: float | None = None) -> SamplePoints:
        """Tensor product of the per-variable point sets."""
        if self.dim < 1:
            raise DimensionMismatch("empty box")
        ts = np.linspace(0.0, horizon, self.t_count)
        xs = self.x_points()
        us = self.u_points(dim_u, u_radius)
        ps = self.p_points(dim_u, self.dim, p_radius)
        it, ix, iu, ip = (a.ravel() for a in np.meshgrid(
            np.arange(len(ts)), np.arange(len(xs)), np.arange(len(us)), np.arange(len(ps)),
            indexing="ij"))
        return SamplePoints(ts[it], xs[ix], us[iu], ps[ip])


# -- truncation and mollification -------------------------------------------

def project_ball(p: Array, k: float) -> Array:
    """pi^(k): identity on |p| <= k, radial projection onto the sphere outside."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(len(p), -1)
    norm = np.linalg.norm(flat, axis=1)
    outside = norm > k
    scale = np.where(outside, k / np.where(outside, norm, 1.0), 1.0)
    # rounding can leave the image an ulp outside the ball; nudge so the map is idempotent
    for _ in range(4):
        over = outside & (np.linalg.norm(flat * scale[:, None], axis=1) > k)
        if not over.any():
            break
        scale[over] = np.nextafter(scale[over], 0.0)
    return p * scale.reshape((-1,) + (1,) * (p.ndim - 1))


def truncate_driver(spec: ProblemSpec, k: float) -> ProblemSpec:
    if not k > 0:
        raise ValueError("truncation level must be positive")
    f = spec.driver

    def truncated(t, x, u, p):
        return f(t, x, u, project_ball(p, k))

    return spec.replace(driver=truncated)


def bump_rule(dim: int, nodes_per_axis: int = 5, node_budget: int = 20000) -> tuple[Array, Array]:
    """Tensor Gauss-Legendre rule for the unit-mass bump exp(-1/(1-|xi|^2)) on the unit ball.

    Weights are normalised on the rule itself so constants are reproduced exactly.
    """
    if nodes_per_axis ** dim > 50 * node_budget:
        raise QuadratureBudgetExceeded(
            f"{nodes_per_axis}^{dim} tensor nodes exceed the budget of {node_budget}")
    xi, w = np.polynomial.legendre.leggauss(nodes_per_axis)
    mesh = np.meshgrid(*([xi] * dim), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    wts = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing="ij")).reshape(dim, -1), axis=0)
    r2 = np.sum(pts ** 2, axis=1)
    inside = r2 < 1.0
    bump = np.zeros_like(r2)
    bump[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    wts = wts * bump
    keep = wts > 0
    if keep.sum() > node_budget:
        raise QuadratureBudgetExceeded(
            f"{int(keep.sum())} quadrature nodes exceed the budget of {node_budget}")
    return pts[keep], wts[keep] / wts[keep].sum()


def mollify_driver(spec: ProblemSpec, eps: float, *, nodes_per_axis: int = 5,
                   node_budget: int = 20000) -> ProblemSpec:
    """Convolve the driver with a bump of radius ``eps`` in (t, x, u, p).

    Time is clamped to [0, T] before evaluation, i.e. the driver is extended
    constantly outside the horizon.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    d, n, T = spec.dim_x, spec.dim_u, spec.horizon
    nodes, weights = bump_rule(1 + d + n + n * d, nodes_per_axis, node_budget)
    nodes = eps * nodes
    q = len(weights)
    xi_t = nodes[:, 0]
    xi_x = nodes[:, 1:1 + d]
    xi_u = nodes[:, 1 + d:1 + d + n]
    xi_p = nodes[:, 1 + d + n:].reshape(q, n, d)
    f = spec.driver
    chunk = max(1, 2_000_000 // q)

    def mollified(t, x, u, p):
        t = np.broadcast_to(np.asarray(t, float), (len(x),))
        out = np.empty((len(x), n))
        for s in range(0, len(x), chunk):
            sl = slice(s, s + chunk)
            m = len(x[sl])
            tt = np.clip(t[sl, None] + xi_t[None, :], 0.0, T).ravel()
            xx = (x[sl, None, :] + xi_x[None]).reshape(m * q, d)
            uu = (u[sl, None, :] + xi_u[None]).reshape(m * q, n)
            pp = (p[sl, None] + xi_p[None]).reshape(m * q, n, d)
            vals = _shaped(f(tt, xx, uu, pp), (m * q, n), "driver").reshape(m, q, n)
            out[sl] = np.einsum("mqk,q->mk", vals, weights)
        return out

    return spec.replace(driver=mollified)


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    kind: str
    callback: str
    message: str
    point: dict | None = None


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> set:
        return {i.kind for i in self.issues}

    def to_dict(self) -> dict:
        return {"pass": self.ok,
                "issues": [dataclasses.asdict(i) for i in self.issues]}


def _call(name: str, fn: Callable, args: tuple, pts: SamplePoints | None):
    try:
        return fn(*args)
    except Exception as exc:  # noqa: BLE001 - echoed to the caller
        point = None
        if pts is not None:
            for i in range(min(len(pts), 1000)):
                try:
                    fn(*(a[i:i + 1] for a in args))
                except Exception:  # noqa: BLE001
                    point = pts.row(i)
                    break
        raise CallbackFailure(name, point or {}, exc) from exc


def _first_bad(mask: Array, pts: SamplePoints) -> dict:
    return pts.row(int(np.flatnonzero(mask)[0]))


def validate_spec(spec: ProblemSpec, box: SamplingBox,
                  consts: HypothesisConstants | None = None) -> ValidationReport:
    """Evaluate every callback on the box and collect problems without raising."""
    issues: list[Issue] = []
    if box.dim != spec.dim_x:
        issues.append(Issue("dimension", "box",
                            f"box has dimension {box.dim}, spec has d = {spec.dim_x}"))
        return ValidationReport(tuple(issues))
    pts = box.points(spec.dim_u, spec.horizon)

    raw_g = np.asarray(_call("terminal", spec.terminal, (pts.x,), pts), float)
    if raw_g.size != len(pts) * spec.dim_u:
        issues.append(Issue("dimension", "terminal",
                            f"terminal returned shape {raw_g.shape}"))
    else:
        g = raw_g.reshape(len(pts), spec.dim_u)
        bad = ~np.isfinite(g).all(axis=1)
        if bad.any():
            issues.append(Issue("nonfinite", "terminal", "non-finite terminal value",
                                _first_bad(bad, pts)))

    sig_args = (pts.t, pts.x, pts.u, pts.p) if spec.mode is Mode.SYSTEM2 else (pts.t, pts.x, pts.u)
    raw_s = np.asarray(_call("sigma", spec.sigma, sig_args, pts), float)
    want = len(pts) if spec.mode is Mode.SYSTEM2 else len(pts) * spec.dim_x ** 2
    if raw_s.size != want and raw_s.size != 1:
        issues.append(Issue("dimension", "sigma", f"sigma returned shape {raw_s.shape}"))
    else:
        s = spec.sigma_matrix(pts.t, pts.x, pts.u, pts.p)
        finite = np.isfinite(s).all(axis=(1, 2))
        if not finite.all():
            issues.append(Issue("nonfinite", "sigma", "non-finite sigma", _first_bad(~finite, pts)))
        sv = np.linalg.svd(np.where(finite[:, None, None], s, 0.0), compute_uv=False)
        c = consts.c_sigma if consts is not None else np.inf
        lo, hi = 1.0 / math.sqrt(c), math.sqrt(c)
        smin, smax = sv[:, -1], sv[:, 0]
        viol = finite & ((smin < lo) | (smax > hi) | (smin <= 0))
        if viol.any():
            i = int(np.flatnonzero(viol)[0])
            issues.append(Issue("ellipticity", "sigma",
                                f"singular values [{smin[i]:.6g}, {smax[i]:.6g}] outside "
                                f"[{lo:.6g}, {hi:.6g}]", pts.row(i)))

    raw_f = np.asarray(_call("driver", spec.driver, (pts.t, pts.x, pts.u, pts.p), pts), float)
    if raw_f.size != len(pts) * spec.dim_u:
        issues.append(Issue("dimension", "driver", f"driver returned shape {raw_f.shape}"))
    else:
        f = raw_f.reshape(len(pts), spec.dim_u)
        bad = ~np.isfinite(f).all(axis=1)
        if bad.any():
            issues.append(Issue("nonfinite", "driver", "non-finite driver value",
                                _first_bad(bad, pts)))
    return ValidationReport(tuple(issues))


def as_points(t, x, u, p) -> SamplePoints:
    """Pack loose arrays into SamplePoints, broadcasting a scalar time."""
    x = np.atleast_2d(np.asarray(x, float))
    t = np.broadcast_to(np.asarray(t, float), (len(x),)).copy()
    return SamplePoints(t, x, np.atleast_2d(np.asarray(u, float)), np.asarray(p, float))


__all__: Sequence[str] = [
    "Mode", "ProblemSpec", "FbsdeSpec", "HypothesisConstants", "DriverSplit", "SamplingBox",
    "SamplePoints", "ValidationReport", "Issue", "project_ball", "truncate_driver",
    "mollify_driver", "bump_rule", "validate_spec", "as_points",
]
