"""Finite-difference solvers for the two quasilinear systems.

The march runs backward from ``t = T``.  Each step solves

    (u^{k+1} - u^k) / dt + tr(a D^2 u^k) + f(t_k, x, u^k, Du^k) = 0

by Picard iteration: coefficients and the driver are frozen at the previous
iterate, the diagonal part of the diffusion is implicit, and off-diagonal
second derivatives (d >= 2) are explicit.  For d >= 2 the implicit operator
is the product of one-dimensional factors, so every linear solve reduces to
batches of tridiagonal systems.  Lateral boundary nodes keep the terminal
value for all times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import ContinuationStall, DimensionMismatch, PicardDivergence, StepRejected
from .model import Mode, ProblemSpec, SamplingBox
from .tridiag import solve_tridiagonal

PICARD_CAP = 50
DAMPING_START = 20
DAMPING = 0.5
DEFAULT_TOL = 1e-8
SCHEMES = ("euler", "bdf2")
FD_REL = 1e-6


@dataclass(frozen=True)
class Grid:
    """Uniform space lattice over [x_lo, x_hi] and ``steps`` uniform time steps on [0, T].

    The reporting ("inner") box sits a quarter of the lattice width away from
    each face.
    """

    x_lo: tuple
    x_hi: tuple
    dx: float
    horizon: float
    steps: int

    def __post_init__(self):
        object.__setattr__(self, "x_lo", tuple(float(v) for v in self.x_lo))
        object.__setattr__(self, "x_hi", tuple(float(v) for v in self.x_hi))
        if len(self.x_lo) != len(self.x_hi) or not 1 <= len(self.x_lo) <= 3:
            raise DimensionMismatch("lattice must have 1 to 3 axes")
        if not (self.dx > 0 and self.horizon > 0 and self.steps >= 1):
            raise ValueError("dx, horizon and steps must be positive")
        for lo, hi in zip(self.x_lo, self.x_hi):
            cells = (hi - lo) / self.dx
            if hi <= lo or abs(cells - round(cells)) > 1e-9 * max(1.0, cells) or round(cells) < 4:
                raise ValueError("each axis must hold at least 4 whole cells of size dx")

    @classmethod
    def make(cls, x_lo, x_hi, dx: float, horizon: float, dt: float | None = None) -> "Grid":
        dt = dx if dt is None else dt
        return cls(tuple(x_lo), tuple(x_hi), dx, horizon, max(1, int(round(horizon / dt))))

    @classmethod
    def from_box(cls, box: SamplingBox, dx: float, horizon: float,
                 dt: float | None = None) -> "Grid":
        """Pad the box by half its width on every side so the inner box equals the box."""
        lo = np.asarray(box.x_lo, float)
        hi = np.asarray(box.x_hi, float)
        pad = (hi - lo) / 2
        if np.any(pad < 4 * dx):
            raise ValueError("box too small for a 4 dx margin at this resolution")
        return cls.make(tuple(lo - pad), tuple(hi + pad), dx, horizon, dt)

    @property
    def dim(self) -> int:
        return len(self.x_lo)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @cached_property
    def t_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    @cached_property
    def shape(self) -> tuple:
        return tuple(int(round((hi - lo) / self.dx)) + 1 for lo, hi in zip(self.x_lo, self.x_hi))

    @cached_property
    def axes(self) -> list:
        return [lo + self.dx * np.arange(m) for lo, m in zip(self.x_lo, self.shape)]

    @cached_property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def inner_lo(self) -> tuple:
        return tuple(lo + (hi - lo) / 4 for lo, hi in zip(self.x_lo, self.x_hi))

    @property
    def inner_hi(self) -> tuple:
        return tuple(hi - (hi - lo) / 4 for lo, hi in zip(self.x_lo, self.x_hi))

    @cached_property
    def inner_slices(self) -> tuple:
        out = []
        for ax, lo, hi in zip(self.axes, self.inner_lo, self.inner_hi):
            idx = np.flatnonzero((ax >= lo - 1e-9 * self.dx) & (ax <= hi + 1e-9 * self.dx))
            out.append(slice(int(idx[0]), int(idx[-1]) + 1))
        return tuple(out)

    @cached_property
    def boundary(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for j in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[j] = 0
            mask[tuple(idx)] = True
            idx[j] = -1
            mask[tuple(idx)] = True
        return mask

    def index_of(self, x) -> tuple:
        """Nearest lattice index of a point."""
        return tuple(int(round((xi - lo) / self.dx)) for xi, lo in zip(x, self.x_lo))

    def params(self) -> dict:
        return {"x_lo": list(self.x_lo), "x_hi": list(self.x_hi), "dx": self.dx,
                "dt": self.dt, "horizon": self.horizon, "steps": self.steps}


# -- lattice derivatives ------------------------------------------------------

def lattice_gradient(u: np.ndarray, dx: float, dim: int, offset: int = 0) -> np.ndarray:
    """Central differences (one-sided at the faces); lattice axes start at ``offset``."""
    return np.stack([np.gradient(u, dx, axis=offset + j) for j in range(dim)], axis=-1)


def _second_axis(u: np.ndarray, dx: float, axis: int) -> np.ndarray:
    out = np.zeros_like(u)
    inner = [slice(None)] * u.ndim
    plus, minus = list(inner), list(inner)
    inner[axis], plus[axis], minus[axis] = slice(1, -1), slice(2, None), slice(None, -2)
    out[tuple(inner)] = (u[tuple(plus)] - 2.0 * u[tuple(inner)] + u[tuple(minus)]) / dx ** 2
    return out


def lattice_hessian(u: np.ndarray, dx: float, dim: int, offset: int = 0) -> np.ndarray:
    """Compact three-point stencil on the diagonal, nested central differences off it."""
    out = np.zeros(u.shape + (dim, dim))
    for j in range(dim):
        out[..., j, j] = _second_axis(u, dx, offset + j)
        for k in range(j + 1, dim):
            mixed = np.gradient(np.gradient(u, dx, axis=offset + j), dx, axis=offset + k)
            out[..., j, k] = mixed
            out[..., k, j] = mixed
    return out


@dataclass(frozen=True, eq=False)
class GridSolution:
    """u on the space-time lattice, shape ``(K+1, *lattice, n)``; derivatives are lazy."""

    grid: Grid
    u: np.ndarray
    residual_norm: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def dim_u(self) -> int:
        return self.u.shape[-1]

    @cached_property
    def du(self) -> np.ndarray:
        """``(K+1, *lattice, n, d)``."""
        return lattice_gradient(self.u, self.grid.dx, self.grid.dim, offset=1)

    @cached_property
    def d2u(self) -> np.ndarray:
        """``(K+1, *lattice, n, d, d)``."""
        return lattice_hessian(self.u, self.grid.dx, self.grid.dim, offset=1)

    @cached_property
    def dtu(self) -> np.ndarray:
        out = np.empty_like(self.u)
        out[1:] = np.diff(self.u, axis=0) / self.grid.dt
        out[0] = out[1]
        return out

    def inner(self, arr: np.ndarray | None = None) -> np.ndarray:
        """Restrict a lattice array (time axis first) to the inner box."""
        arr = self.u if arr is None else arr
        return arr[(slice(None),) + self.grid.inner_slices]

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, dim_u: int | None = None) -> "GridSolution":
        """Tabulate ``fn(t (M,), x (M, d)) -> (M, n)`` on the lattice."""
        x = grid.nodes
        slices = []
        for t in grid.t_nodes:
            v = np.asarray(fn(np.full(len(x), t), x), float)
            slices.append(v.reshape(len(x), -1))
        u = np.stack(slices).reshape((grid.steps + 1,) + grid.shape + (slices[0].shape[1],))
        if dim_u is not None and u.shape[-1] != dim_u:
            raise DimensionMismatch("function output has the wrong width")
        return cls(grid, u)


# -- the backward march ------------------------------------------------------

class _Operator:
    """Diagonal-implicit parabolic operator for one time level.

    ``adiag``: (*lattice, d) diagonal diffusion, ``drift``: (*lattice, n, d) or None.
    Boundary nodes carry zero coefficients so their rows are the identity.
    """

    def __init__(self, grid: Grid, adiag: np.ndarray, drift: np.ndarray | None, n: int,
                 dt: float):
        self.grid, self.n = grid, n
        dx = grid.dx
        live = ~grid.boundary
        self.lower, self.diag, self.upper = [], [], []
        for j in range(grid.dim):
            c = (dt / dx ** 2) * np.where(live, adiag[..., j], 0.0)[..., None]
            c = np.broadcast_to(c, grid.shape + (n,))
            if drift is None:
                lo = up = -c
            else:
                b = (dt / (2 * dx)) * np.where(live[..., None], drift[..., j], 0.0)
                lo, up = -c + b, -c - b
            self.lower.append(lo)
            self.upper.append(up)
            self.diag.append(1.0 - lo - up)

    def _line(self, arr, j):
        return np.moveaxis(arr, j, -1)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        v = rhs
        for j in range(self.grid.dim):
            x = solve_tridiagonal(self._line(self.lower[j], j), self._line(self.diag[j], j),
                                  self._line(self.upper[j], j), self._line(v, j))
            v = np.moveaxis(x, -1, j)
        return v

    def apply(self, u: np.ndarray) -> np.ndarray:
        v = u
        for j in reversed(range(self.grid.dim)):
            lo, di, up = self.lower[j], self.diag[j], self.upper[j]
            out = di * v
            head = [slice(None)] * v.ndim
            tail = list(head)
            head[j], tail[j] = slice(1, None), slice(None, -1)
            out[tuple(head)] += lo[tuple(head)] * v[tuple(tail)]
            out[tuple(tail)] += up[tuple(tail)] * v[tuple(head)]
            v = out
        return v


class _Model:
    """Supplies frozen coefficients at a Picard iterate."""

    dim_u: int

    def coefficients(self, k: int, t: float, u: np.ndarray):
        """Return (a (*lattice, d, d), f (*lattice, n), drift or None)."""
        raise NotImplementedError


class _SpecModel(_Model):
    def __init__(self, spec: ProblemSpec, grid: Grid, homotopy: float | None = None):
        self.spec, self.grid, self.homotopy = spec, grid, homotopy
        self.dim_u = spec.dim_u
        self.x = grid.nodes

    def coefficients(self, k, t, u):
        g = self.grid
        m = g.size
        flat_u = u.reshape(m, self.dim_u)
        du = lattice_gradient(u, g.dx, g.dim).reshape(m, self.dim_u, g.dim)
        tt = np.full(m, t)
        a = self.spec.diffusion(tt, self.x, flat_u, du)
        if self.homotopy is not None:
            lam = self.homotopy
            a = lam * a + (1.0 - lam) * np.eye(g.dim)
        f = self.spec.eval_driver(tt, self.x, flat_u, du)
        return a.reshape(g.shape + (g.dim, g.dim)), f.reshape(g.shape + (self.dim_u,)), None


@dataclass
class _MarchResult:
    u: np.ndarray
    residual: float
    iterations: list


def _cross_term(a: np.ndarray, u: np.ndarray, grid: Grid) -> np.ndarray:
    out = np.zeros_like(u)
    for j in range(grid.dim):
        gj = np.gradient(u, grid.dx, axis=j)
        for k in range(j + 1, grid.dim):
            out += 2.0 * a[..., j, k][..., None] * np.gradient(gj, grid.dx, axis=k)
    return out


def _march(model: _Model, grid: Grid, terminal: np.ndarray, boundary: np.ndarray,
           tol: float, warm: np.ndarray | None = None, scheme: str = "euler") -> _MarchResult:
    """terminal: (*lattice, n) values at T; boundary: (K+1, *lattice, n) or (*lattice, n).

    ``scheme="bdf2"`` replaces the difference quotient by the two-step backward
    formula after a first Euler step; the per-step linear systems keep the
    same M-matrix structure with dt scaled by 2/3.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown time scheme {scheme!r}")
    n = model.dim_u
    live = ~grid.boundary
    interior = live[..., None]
    u = np.empty((grid.steps + 1,) + grid.shape + (n,))
    u[-1] = terminal
    iters = []
    worst = 0.0
    for k in range(grid.steps - 1, -1, -1):
        t = grid.t_nodes[k]
        if scheme == "bdf2" and k + 2 <= grid.steps:
            dt = 2.0 * grid.dt / 3.0
            nxt = (4.0 * u[k + 1] - u[k + 2]) / 3.0
        else:
            dt = grid.dt
            nxt = u[k + 1]
        bnd = boundary[k] if boundary.ndim == nxt.ndim + 1 else boundary
        um = np.where(interior, warm[k] if warm is not None else u[k + 1], bnd)
        diff = math.inf
        for it in range(PICARD_CAP + 1):
            a, f, drift = model.coefficients(k, t, um)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(f))):
                raise StepRejected(f"non-finite coefficients at t = {t:.6g}")
            src = f + _cross_term(a, um, grid) if grid.dim > 1 else f
            rhs = np.where(interior, nxt + dt * src, bnd)
            op = _Operator(grid, np.diagonal(a, axis1=-2, axis2=-1), drift, n, dt)
            if diff < tol:
                res = np.max(np.abs(np.where(interior, rhs - op.apply(um), 0.0))) / dt
                if res <= tol:
                    break
            if it == PICARD_CAP:
                raise PicardDivergence(
                    f"Picard iteration did not converge at t = {t:.6g} (last change {diff:.3g})")
            new = op.solve(rhs)
            if not np.all(np.isfinite(new)):
                raise StepRejected(f"non-finite iterate at t = {t:.6g}; refine dt")
            if it >= DAMPING_START:
                new = DAMPING * new + (1.0 - DAMPING) * um
            diff = float(np.max(np.abs(new - um)))
            um = new
        u[k] = um
        iters.append(it)
        worst = max(worst, res)
    iters.reverse()
    return _MarchResult(u, worst, iters)


def _terminal_values(spec: ProblemSpec, grid: Grid) -> np.ndarray:
    g = spec.eval_terminal(grid.nodes)
    return g.reshape(grid.shape + (spec.dim_u,))


def _solve(spec: ProblemSpec, grid: Grid, tol: float, homotopy=None, warm=None,
           scheme: str = "euler") -> GridSolution:
    if spec.dim_x != grid.dim:
        raise DimensionMismatch(f"spec has d = {spec.dim_x}, grid has {grid.dim} axes")
    if not tol > 0:
        raise ValueError("tol must be positive")
    g = _terminal_values(spec, grid)
    res = _march(_SpecModel(spec, grid, homotopy), grid, g, g, tol, warm, scheme)
    return GridSolution(grid, res.u, res.residual,
                        {"picard_iterations": res.iterations,
                         "picard_total": int(sum(res.iterations)), "tol": tol, "scheme": scheme})


def solve_system1(spec: ProblemSpec, grid: Grid, tol: float = DEFAULT_TOL,
                  scheme: str = "euler") -> GridSolution:
    if spec.mode is not Mode.SYSTEM1:
        raise ValueError("solve_system1 needs a System1 spec")
    return _solve(spec, grid, tol, scheme=scheme)


def solve_system2_1d(spec: ProblemSpec, grid: Grid, tol: float = DEFAULT_TOL,
                     scheme: str = "euler") -> GridSolution:
    if spec.mode is not Mode.SYSTEM2 or grid.dim != 1:
        raise ValueError("solve_system2_1d needs a System2 spec on a one-dimensional grid")
    return _solve(spec, grid, tol, scheme=scheme)


def solve(spec: ProblemSpec, grid: Grid, tol: float = DEFAULT_TOL,
          scheme: str = "euler") -> GridSolution:
    if spec.mode is Mode.SYSTEM2:
        return solve_system2_1d(spec, grid, tol, scheme)
    return solve_system1(spec, grid, tol, scheme)


# -- the differentiated system (d = 1) ----------------------------------------

def _fd_partial(fn: Callable, args: list, slot: int, col: tuple) -> np.ndarray:
    """Central difference of fn w.r.t. args[slot][(:,) + col] with step 1e-6 (1 + |arg|)."""
    base = args[slot]
    idx = (slice(None),) + col
    h = FD_REL * (1.0 + np.abs(base[idx]))
    up, dn = base.copy(), base.copy()
    up[idx] += h
    dn[idx] -= h
    a_up = list(args)
    a_dn = list(args)
    a_up[slot], a_dn[slot] = up, dn
    diff = np.asarray(fn(*a_up), float) - np.asarray(fn(*a_dn), float)
    return diff / (2.0 * h).reshape((-1,) + (1,) * (diff.ndim - 1))


def terminal_gradient(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Dg by central differences, shape (M, n, d)."""
    cols = [_fd_partial(lambda y: spec.eval_terminal(y), [x.copy()], 0, (j,))
            for j in range(x.shape[1])]
    return np.stack(cols, axis=-1)


class _GradientModel(_Model):
    """Linear system for v^i = u^i_x with coefficients frozen from a base solution.

    v^i_t + a v^i_xx + (b + f^i_{p^i}) v^i_x
        + sum_{j != i} f^i_{p^j} v^j_x + sum_j f^i_{u^j} v^j + f^i_x = 0,
    b = a_x + sum_j a_{u^j} u^j_x (+ sum_j a_{p^j} u^j_xx in System2 mode).
    """

    def __init__(self, spec: ProblemSpec, base: GridSolution):
        self.spec, self.base, self.grid = spec, base, base.grid
        self.dim_u = spec.dim_u
        self.x = base.grid.nodes
        self._cache: dict = {}

    def _frozen(self, k: int):
        if k in self._cache:
            return self._cache[k]
        spec, g, n = self.spec, self.grid, self.dim_u
        m = g.size
        t = np.full(m, g.t_nodes[k])
        u = self.base.u[k].reshape(m, n)
        p = self.base.du[k].reshape(m, n, 1)
        uxx = self.base.d2u[k].reshape(m, n)

        def afun(tt, xx, uu, pp):
            return spec.diffusion(tt, xx, uu, pp)[:, 0, 0]

        def ffun(tt, xx, uu, pp):
            return spec.eval_driver(tt, xx, uu, pp)

        args = [t, self.x.copy(), u.copy(), p.copy()]
        a = afun(*args)
        b = _fd_partial(afun, args, 1, (0,))
        for j in range(n):
            b = b + _fd_partial(afun, args, 2, (j,)) * p[:, j, 0]
            if spec.mode is Mode.SYSTEM2:
                b = b + _fd_partial(afun, args, 3, (j, 0)) * uxx[:, j]
        fx = _fd_partial(ffun, args, 1, (0,))                               # (m, n)
        fu = np.stack([_fd_partial(ffun, args, 2, (j,)) for j in range(n)], axis=-1)
        fp = np.stack([_fd_partial(ffun, args, 3, (j, 0)) for j in range(n)], axis=-1)
        drift = (b[:, None] + np.einsum("mii->mi", fp))[..., None]           # (m, n, 1)
        off = fp.copy()
        for i in range(n):
            off[:, i, i] = 0.0
        out = (a.reshape(g.shape + (1, 1)), fx.reshape(g.shape + (n,)),
               fu.reshape(g.shape + (n, n)), off.reshape(g.shape + (n, n)),
               drift.reshape(g.shape + (n, 1)))
        self._cache = {k: out}
        return out

    def coefficients(self, k, t, v):
        a, fx, fu, off, drift = self._frozen(k)
        vx = np.gradient(v, self.grid.dx, axis=0)
        src = fx + np.einsum("...ij,...j->...i", fu, v) + np.einsum("...ij,...j->...i", off, vx)
        return a, src, drift


def solve_gradient_system(spec: ProblemSpec, base: GridSolution,
                          tol: float = DEFAULT_TOL) -> GridSolution:
    """Solve for v = Du directly; ``diagnostics['du_agreement']`` compares with base.du."""
    grid = base.grid
    if grid.dim != 1 or spec.dim_x != 1:
        raise DimensionMismatch("the differentiated system is implemented for d = 1")
    dg = terminal_gradient(spec, grid.nodes)[..., 0].reshape(grid.shape + (spec.dim_u,))
    res = _march(_GradientModel(spec, base), grid, dg, dg, tol)
    sol = GridSolution(grid, res.u, res.residual,
                       {"picard_iterations": res.iterations, "tol": tol})
    gap = np.max(np.abs(sol.inner() - base.inner(base.du[..., 0])))
    sol.diagnostics["du_agreement"] = float(gap)
    return sol


# -- continuation in the diffusion coefficient --------------------------------

@dataclass(frozen=True)
class ContinuationTrace:
    lambdas: tuple
    solutions: tuple
    newton_iters: tuple

    @property
    def final(self) -> GridSolution:
        return self.solutions[-1]


def continuation_sweep(spec: ProblemSpec, grid: Grid, steps: int,
                       tol: float = DEFAULT_TOL, min_step: float = 2.0 ** -10) -> ContinuationTrace:
    """Follow lam -> (lam a + (1 - lam)) from the constant-coefficient problem to lam = 1.

    A failed lam-step is retried with half the increment until ``min_step``.
    """
    if spec.mode is not Mode.SYSTEM2 or grid.dim != 1:
        raise ValueError("continuation is defined for System2 on a one-dimensional grid")
    if steps < 1:
        raise ValueError("steps must be positive")
    first = _solve(spec, grid, tol, homotopy=0.0)
    lambdas, sols, iters = [0.0], [first], [first.diagnostics["picard_total"]]
    lam = 0.0
    for j in range(1, steps + 1):
        target = j / steps
        inc = target - lam
        while lam < target:
            nxt = min(target, lam + inc)
            try:
                sol = _solve(spec, grid, tol, homotopy=nxt, warm=sols[-1].u)
            except (PicardDivergence, StepRejected) as exc:
                inc /= 2
                if inc < min_step:
                    raise ContinuationStall(f"continuation stalled at lam = {lam:.6g}") from exc
                continue
            lam = nxt
            lambdas.append(lam)
            sols.append(sol)
            iters.append(sol.diagnostics["picard_total"])
    return ContinuationTrace(tuple(lambdas), tuple(sols), tuple(iters))


# -- linear Feynman-Kac solves ------------------------------------------------

class _LinearModel(_Model):
    def __init__(self, a: Callable[[int], np.ndarray], source: Callable[[int], np.ndarray],
                 dim_u: int):
        self.a, self.source, self.dim_u = a, source, dim_u

    def coefficients(self, k, t, u):
        return self.a(k), self.source(k), None


def solve_linear(grid: Grid, a: Callable[[int], np.ndarray], source: Callable[[int], np.ndarray],
                 boundary: np.ndarray | None = None, tol: float = DEFAULT_TOL) -> GridSolution:
    """w_t + tr(a D^2 w) + source = 0 with zero terminal data.

    ``a(k)``: (*lattice, d, d); ``source(k)``: (*lattice, m); ``boundary``:
    lateral values (K+1, *lattice, m), zero when omitted.
    """
    m = source(grid.steps).shape[-1]
    zero = np.zeros(grid.shape + (m,))
    bnd = zero if boundary is None else boundary
    res = _march(_LinearModel(a, source, m), grid, zero, bnd, tol)
    return GridSolution(grid, res.u, res.residual, {"picard_iterations": res.iterations})
