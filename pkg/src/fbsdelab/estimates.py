"""Empirical a-priori estimates on solved grids and path ensembles.

Suprema over stopping times are replaced by suprema over grid states
``(t, x)``: for the Markov dynamics here the conditional energy from a stopping
time is a function of ``(tau, X_tau)``, so the Feynman-Kac field

    w(t, x) = E_{t,x} int_t^T |Z_s|^2 1_window(s) ds

bounds the bmo norm of ``Z 1_window`` up to grid resolution.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import qmc

from .errors import DegenerateFit, InsufficientCylinders, InsufficientPaths, NonTerminating
from .fbsde import PathBundle
from .hypotheses import LyapunovPair
from .model import ProblemSpec
from .solver import DEFAULT_TOL, Grid, GridSolution, solve_linear

EXPONENT_SLACK = 0.05
MIN_CYLINDERS = 5
MIN_STRATUM = 100
SLICE_CAP = 10 ** 6
BETA_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
GAMMA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
_TIME_EPS = 1e-12


# -- norms -------------------------------------------------------------------

def sup_norm(u: GridSolution) -> float:
    """Max of |u| over inner-box nodes, all times and components."""
    return float(np.max(np.abs(u.inner())))


def _loglog_slope(scales, values, floor: float = 0.0) -> float:
    """OLS slope of log(values) on log(scales).

    The two smallest scales are dropped when their values sit below ``floor``.
    """
    s = np.asarray(scales, dtype=float)
    v = np.asarray(values, dtype=float)
    order = np.argsort(s)
    s, v = s[order], v[order]
    drop = 0
    while drop < 2 and drop < len(v) and v[drop] < floor:
        drop += 1
    s, v = s[drop:], v[drop:]
    keep = v > 0
    s, v = s[keep], v[keep]
    if len(s) < 2:
        raise DegenerateFit("fewer than two usable points for a log-log fit")
    return float(np.polyfit(np.log(s), np.log(v), 1)[0])


class HolderValue(NamedTuple):
    value: float
    witness: tuple   # ((t, x), (t', x'))


def _inner_index_ranges(grid: Grid) -> list:
    return [(sl.start, sl.stop) for sl in grid.inner_slices]


def _pair_sample(grid: Grid, budget: int):
    """Node-index pairs in the inner box: a third spatial, a third temporal, a third general."""
    d = grid.dim
    ranges = _inner_index_ranges(grid)
    kmax = grid.steps
    third = budget // 3
    counts = (third, third, budget - 2 * third)
    sampler = qmc.Halton(d=2 * (d + 1), scramble=False)
    pts = sampler.random(budget + 1)[1:]

    def to_index(col, lo, hi):
        return np.minimum(lo + np.floor(col * (hi - lo)).astype(int), hi - 1)

    out = []
    start = 0
    for kind, cnt in zip(("spatial", "temporal", "general"), counts):
        blk = pts[start:start + cnt]
        start += cnt
        t1 = to_index(blk[:, 0], 0, kmax + 1)
        t2 = to_index(blk[:, d + 1], 0, kmax + 1)
        x1 = np.stack([to_index(blk[:, 1 + j], *ranges[j]) for j in range(d)], axis=1)
        x2 = np.stack([to_index(blk[:, d + 2 + j], *ranges[j]) for j in range(d)], axis=1)
        if kind == "spatial":
            t2 = t1
        elif kind == "temporal":
            x2 = x1
        out.append((t1, x1, t2, x2))
    t1, x1, t2, x2 = (np.concatenate(parts) for parts in zip(*out))
    return t1, x1, t2, x2


def _pair_data(u: GridSolution, budget: int):
    g = u.grid
    t1, x1, t2, x2 = _pair_sample(g, budget)
    v1 = u.u[(t1,) + tuple(x1.T)]
    v2 = u.u[(t2,) + tuple(x2.T)]
    du = np.linalg.norm(v1 - v2, axis=-1)
    dt = np.abs(g.t_nodes[t1] - g.t_nodes[t2])
    dx = np.linalg.norm((x1 - x2) * g.dx, axis=1)
    distinct = (dt > 0) | (dx > 0)
    return t1, x1, t2, x2, du, dt, dx, distinct


def holder_seminorm(u: GridSolution, alpha: float, budget: int = 3000) -> HolderValue:
    """Parabolic Holder quotient |u - u'| / (|t - t'|^(alpha/2) + |x - x'|^alpha), maximized."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if budget < 1000:
        raise ValueError("budget must be at least 1000 pairs")
    g = u.grid
    t1, x1, t2, x2, du, dt, dx, distinct = _pair_data(u, budget)
    den = dt ** (alpha / 2.0) + dx ** alpha
    q = np.where(distinct, du / np.where(distinct, den, 1.0), 0.0)
    i = int(np.argmax(q))
    node = lambda t, x: (float(g.t_nodes[t]), tuple(float(g.x_lo[j] + g.dx * x[j]) for j in range(g.dim)))
    return HolderValue(float(q[i]), (node(t1[i], x1[i]), node(t2[i], x2[i])))


def holder_alpha_fit(u: GridSolution, budget: int = 3000, bins: int = 12) -> float:
    """Fitted Holder exponent in (0, 1].

    Pairs are binned by parabolic distance; the slope of the per-bin maximal
    increment over the smaller half of the scales is the exponent.
    """
    _, _, _, _, du, dt, dx, distinct = _pair_data(u, budget)
    rho = np.sqrt(dt) + dx
    rho, du = rho[distinct], du[distinct]
    if np.max(du, initial=0.0) < _TIME_EPS:
        return 1.0
    edges = np.geomspace(rho.min(), rho.max() * (1 + 1e-12), bins + 1)
    which = np.clip(np.searchsorted(edges, rho, side="right") - 1, 0, bins - 1)
    scales, env = [], []
    for b in range(bins):
        sel = which == b
        if np.any(sel) and np.max(du[sel]) > 0:
            scales.append(math.sqrt(edges[b] * edges[b + 1]))
            env.append(float(np.max(du[sel])))
    half = max(3, len(scales) // 2)
    slope = _loglog_slope(scales[:half], env[:half])
    return float(min(1.0, max(0.01, slope)))


# -- oscillation decay ----------------------------------------------------------

@dataclass(frozen=True)
class ParabolicCylinder:
    """{t0 <= t <= t0 + R^2, max_i |x^i - x0^i| <= R}."""

    t0: float
    x0: tuple
    radius: float
    horizon: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.t0 + self.radius ** 2 > self.horizon + _TIME_EPS:
            raise ValueError("cylinder extends past the horizon")

    def scaled(self, factor: float) -> "ParabolicCylinder":
        return ParabolicCylinder(self.t0, self.x0, factor * self.radius)

    def mask(self, grid: Grid):
        t = grid.t_nodes
        tsel = (t >= self.t0 - _TIME_EPS) & (t <= self.t0 + self.radius ** 2 + _TIME_EPS)
        xsel = tuple((ax >= x0 - self.radius - _TIME_EPS) & (ax <= x0 + self.radius + _TIME_EPS)
                     for ax, x0 in zip(grid.axes, self.x0))
        return tsel, xsel

    def oscillation(self, u: GridSolution) -> np.ndarray:
        """Per-component max - min over the cylinder's nodes."""
        tsel, xsel = self.mask(u.grid)
        vals = u.u[np.ix_(tsel, *xsel)] if u.grid.dim > 1 else u.u[tsel][:, xsel[0]]
        flat = vals.reshape(-1, u.dim_u)
        if flat.shape[0] == 0:
            return np.zeros(u.dim_u)
        return flat.max(axis=0) - flat.min(axis=0)


def default_cylinders(grid: Grid, count: int = 20) -> list:
    """Deterministic family whose doubles fit the inner box and the horizon."""
    lo, hi = np.array(grid.inner_lo), np.array(grid.inner_hi)
    half = float(np.min(hi - lo)) / 2.0
    r_max = 0.99 * min(half / 2.0, math.sqrt(grid.horizon) / 2.0)
    radii = []
    r = r_max
    while r >= 2 * grid.dx and r * r >= grid.dt and len(radii) < 4:
        radii.append(r)
        r /= 2.0
    if not radii:
        radii = [r_max]
    pts = qmc.Halton(d=grid.dim + 1, scramble=False).random(count + 1)[1:]
    out = []
    for i in range(count):
        rad = radii[i % len(radii)]
        t0 = pts[i, 0] * (grid.horizon - 4 * rad * rad)
        x0 = lo + 2 * rad + pts[i, 1:] * (hi - lo - 4 * rad)
        out.append(ParabolicCylinder(float(t0), tuple(x0), rad, grid.horizon))
    return out


@dataclass
class OscillationFit:
    beta: float
    gamma: float
    const: float
    min_slack: float
    per_component: list = field(default_factory=list)
    cylinders: int = 0


def _fit_component(osc_r, osc_2r, radii):
    if np.all(osc_2r <= _TIME_EPS) and np.all(osc_r <= _TIME_EPS):
        return 0.0, GAMMA_GRID[0], 0.0, 0.0
    best = None
    for beta in BETA_GRID:
        for gamma in GAMMA_GRID:
            c0 = max(0.0, float(np.max((osc_r - beta * osc_2r) / radii ** gamma)))
            key = (c0, beta, gamma)
            if best is None or c0 < best[0] * (1 - 1e-12) - 1e-15:
                best = key
    c0, beta, gamma = best
    slack = float(np.min(beta * osc_2r + c0 * radii ** gamma - osc_r))
    return beta, gamma, c0, slack


def oscillation_decay_fit(u: GridSolution, cylinders: Sequence[ParabolicCylinder]) -> OscillationFit:
    """Fit osc_{Q_R} <= beta osc_{Q_2R} + C0 R^gamma over a cylinder family.

    Grid search over beta and gamma; the smallest C0 wins, then the smallest
    beta, then the smallest gamma.  The reported triple is the worst
    (largest-beta) component.
    """
    if len(cylinders) < MIN_CYLINDERS:
        raise InsufficientCylinders(f"need at least {MIN_CYLINDERS} cylinders, got {len(cylinders)}")
    g = u.grid
    for c in cylinders:
        if c.t0 + 4 * c.radius ** 2 > g.horizon + _TIME_EPS:
            raise ValueError(f"doubled cylinder at t0 = {c.t0} passes the horizon")
        if any(x0 - 2 * c.radius < lo - _TIME_EPS or x0 + 2 * c.radius > hi + _TIME_EPS
               for x0, lo, hi in zip(c.x0, g.x_lo, g.x_hi)):
            raise ValueError(f"doubled cylinder at x0 = {c.x0} leaves the lattice")
    osc_r = np.array([c.oscillation(u) for c in cylinders])
    osc_2r = np.array([c.scaled(2.0).oscillation(u) for c in cylinders])
    radii = np.array([c.radius for c in cylinders])
    comps = [_fit_component(osc_r[:, i], osc_2r[:, i], radii) for i in range(u.dim_u)]
    worst = max(comps, key=lambda c: (c[0], c[2]))
    return OscillationFit(worst[0], worst[1], worst[2], min(c[3] for c in comps),
                          [dict(zip(("beta", "gamma", "const", "min_slack"), c)) for c in comps],
                          len(cylinders))


def terminal_layer_check(u: GridSolution) -> float:
    """Fitted exponent of sup_x |u(t, x) - u(T, x)| against T - t over the last quarter."""
    g = u.grid
    k0 = int(math.floor(0.75 * g.steps))
    ks = np.arange(k0, g.steps)
    inner = u.inner()
    gaps = np.array([np.max(np.linalg.norm(inner[k] - inner[-1], axis=-1)) for k in ks])
    if np.all(gaps < 1e-12):
        raise DegenerateFit("solution coincides with its terminal data")
    return _loglog_slope(g.horizon - g.t_nodes[ks], gaps)


# -- Feynman-Kac energy -------------------------------------------------------------

def _overlap(a: float, b: float, lo: float, hi: float) -> float:
    return max(0.0, min(b, hi) - max(a, lo))


class EnergyModel:
    """Frozen coefficients a = sigma sigma^T / 2 and |Z|^2 = sum_i |sigma^T Du^i|^2 along u."""

    def __init__(self, u: GridSolution, spec: ProblemSpec, tol: float = DEFAULT_TOL):
        g = u.grid
        self.u, self.grid, self.tol = u, g, tol
        x = g.nodes
        m = g.size
        du = u.du
        self.a = np.empty((g.steps + 1,) + g.shape + (g.dim, g.dim))
        self.z2 = np.empty((g.steps + 1,) + g.shape)
        for k, t in enumerate(g.t_nodes):
            uk = u.u[k].reshape(m, u.dim_u)
            pk = du[k].reshape(m, u.dim_u, g.dim)
            tt = np.full(m, t)
            sig = spec.sigma_matrix(tt, x, uk, pk)
            z = pk @ sig
            self.a[k] = (0.5 * sig @ np.swapaxes(sig, -1, -2)).reshape(g.shape + (g.dim, g.dim))
            self.z2[k] = np.sum(z * z, axis=(-1, -2)).reshape(g.shape)
        self._bmask = g.boundary

    def field(self, window) -> tuple:
        """Energy field over the time range touched by ``window``.

        Returns ``(w, k_lo)`` with ``w[j]`` the field at grid time ``k_lo + j``;
        below ``k_lo`` the field is dominated by its value at ``k_lo``.
        """
        g = self.grid
        s0, s1 = float(window[0]), float(window[1])
        if not (-_TIME_EPS <= s0 <= s1 <= g.horizon + _TIME_EPS):
            raise ValueError(f"window {window} not inside [0, {g.horizon}]")
        t = g.t_nodes
        k_lo = max(0, min(g.steps - 1, int(math.floor(s0 / g.dt + 1e-9))))
        k_hi = max(k_lo + 1, min(g.steps, int(math.ceil(s1 / g.dt - 1e-9))))
        steps = k_hi - k_lo
        weights = np.array([_overlap(t[k], t[k + 1], s0, s1) / g.dt for k in range(k_lo, k_hi)])
        sub = Grid(g.x_lo, g.x_hi, g.dx, steps * g.dt, steps)
        src = self.z2[k_lo:k_hi] * weights.reshape((-1,) + (1,) * g.dim)
        # boundary nodes follow the stopped process: energy accumulates in place
        bnd = np.zeros((steps + 1,) + g.shape + (1,))
        bnd[:-1, ..., 0] = np.cumsum((src * g.dt)[::-1], axis=0)[::-1]
        bnd[..., 0] *= self._bmask
        sol = solve_linear(sub, lambda k: self.a[k_lo + k], lambda k: src[min(k, steps - 1)][..., None],
                           boundary=bnd, tol=self.tol)
        return sol.u[..., 0], k_lo

    def energy(self, window) -> float:
        """max over inner box and times of w."""
        if window[1] - window[0] <= 0:
            return 0.0
        w, _ = self.field(window)
        inner = w[(slice(None),) + self.grid.inner_slices]
        return float(max(0.0, np.max(inner)))

    def norm(self, window) -> float:
        return math.sqrt(self.energy(window))


def energy_field(u: GridSolution, spec: ProblemSpec, window=None, tol: float = DEFAULT_TOL) -> GridSolution:
    """w on the full grid for the given window (default [0, T])."""
    g = u.grid
    window = (0.0, g.horizon) if window is None else window
    model = EnergyModel(u, spec, tol)
    w, k_lo = model.field(window)
    full = np.empty((g.steps + 1,) + g.shape)
    full[k_lo:k_lo + w.shape[0]] = w
    full[k_lo + w.shape[0]:] = 0.0
    full[:k_lo] = w[0]   # no source before the window; upper bound held constant
    return GridSolution(g, full[..., None], 0.0, {"window": tuple(window)})


def bmo_norm_fk(u: GridSolution, spec: ProblemSpec, window=None, tol: float = DEFAULT_TOL) -> float:
    """sqrt of the max over the inner box of the Feynman-Kac energy of Z 1_window."""
    g = u.grid
    window = (0.0, g.horizon) if window is None else window
    return EnergyModel(u, spec, tol).norm(window)


class MonteCarloBmo(NamedTuple):
    value: float
    stderr: float
    skipped: int


def bmo_norm_mc(bundle: PathBundle, window=None, strata: int = 20) -> MonteCarloBmo:
    """Path-ensemble estimate of the same norm.

    At each grid time in the window, live paths are split into quantile
    strata of the first state coordinate; each stratum's mean remaining
    energy estimates E_{t,x} int |Z|^2.  Strata below the path minimum are
    skipped and counted.
    """
    if bundle.z_paths is None:
        raise ValueError("bundle has no Z paths; decouple it first")
    t = np.asarray(bundle.t_nodes)
    horizon = float(t[-1])
    s0, s1 = (float(t[0]), horizon) if window is None else (float(window[0]), float(window[1]))
    live = ~np.asarray(bundle.escaped)
    if live.sum() < MIN_STRATUM:
        raise InsufficientPaths(f"only {int(live.sum())} live paths")
    z = np.asarray(bundle.z_paths)[live]
    x = np.asarray(bundle.x_paths)[live]
    z2 = np.sum(z.reshape(z.shape[0], z.shape[1], -1) ** 2, axis=-1)
    steps = len(t) - 1
    weights = np.array([_overlap(t[k], t[k + 1], s0, s1) for k in range(steps)])
    inc = z2[:, :steps] * weights
    remaining = np.concatenate([np.cumsum(inc[:, ::-1], axis=1)[:, ::-1],
                                np.zeros((inc.shape[0], 1))], axis=1)
    best, best_se, skipped = 0.0, 0.0, 0
    for k in range(steps + 1):
        if t[k] > s1 + _TIME_EPS or (k < steps and t[k + 1] <= s0 + _TIME_EPS):
            continue
        coord = x[:, k, 0] if x.ndim == 3 else x[:, k]
        edges = np.unique(np.quantile(coord, np.linspace(0, 1, strata + 1)[1:-1]))
        label = np.searchsorted(edges, coord, side="right")
        for lab in range(len(edges) + 1):
            vals = remaining[label == lab, k]
            if vals.size == 0:
                continue
            if vals.size < MIN_STRATUM:
                skipped += 1
                continue
            mean = float(vals.mean())
            if mean > best:
                best, best_se = mean, float(vals.std(ddof=1) / math.sqrt(vals.size))
    value = math.sqrt(best)
    stderr = best_se / (2 * value) if value > 0 else 0.0
    return MonteCarloBmo(value, stderr, skipped)


# -- slicing ------------------------------------------------------------------------

_SLICE_SLACK = 1e-9


def slice_index(u: GridSolution, spec: ProblemSpec, delta: float, tol: float = DEFAULT_TOL,
                model: EnergyModel | None = None) -> int:
    """Greedy deterministic partition of [0, T] into slices of energy norm <= delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    model = model or EnergyModel(u, spec, tol)
    horizon = u.grid.horizon
    target = (delta * (1 + _SLICE_SLACK)) ** 2
    s, count = 0.0, 0
    while horizon - s > _SLICE_SLACK * horizon:
        count += 1
        if count > SLICE_CAP:
            raise NonTerminating(f"more than {SLICE_CAP} slices at delta = {delta}")
        if model.energy((s, horizon)) <= target:
            break
        phi = lambda e: model.energy((s, e)) - (delta * (1 + 2 * _SLICE_SLACK)) ** 2
        s = brentq(phi, s, horizon, xtol=1e-13 * horizon, rtol=1e-13)
    return count


class SliceExponent(NamedTuple):
    exponent: float
    threshold: float
    passed: bool
    deltas: tuple
    norms: tuple


def slice_exponent_check(u: GridSolution, spec: ProblemSpec, epsilon: float,
                         deltas: Sequence[float], tol: float = DEFAULT_TOL,
                         end_times: Sequence[float] | None = None) -> SliceExponent:
    """Fit the decay of ||Z 1_[t-delta, t]|| in delta against epsilon / (2 + epsilon)."""
    deltas = [float(d) for d in deltas]
    if len(deltas) < 4:
        raise ValueError("at least four window lengths are required")
    if any(a <= b for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly decreasing")
    horizon = u.grid.horizon
    ends = end_times or [horizon * f for f in (1.0, 0.75, 0.5, 0.25)]
    model = EnergyModel(u, spec, tol)
    norms = []
    for d in deltas:
        vals = [model.norm((e - d, e)) for e in ends if e - d >= -_TIME_EPS]
        norms.append(max(vals) if vals else 0.0)
    if max(norms) < 1e-12:
        raise DegenerateFit("all windowed norms vanish")
    slope = _loglog_slope(deltas, norms, floor=10 * tol)
    threshold = epsilon / (2 + epsilon) - EXPONENT_SLACK
    return SliceExponent(slope, threshold, slope >= threshold, tuple(deltas), tuple(norms))


class LyapunovBound(NamedTuple):
    margin: float
    bound: float
    measured: float


def _ball_points(dim: int, radius: float, count: int = 401) -> np.ndarray:
    if dim == 1:
        return np.linspace(-radius, radius, count)[:, None]
    dirs = qmc.Halton(d=dim, scramble=False).random(count + 1)[1:] * 2 - 1
    dirs = np.concatenate([dirs, np.eye(dim), -np.eye(dim)])
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
    shells = np.linspace(0, radius, 21)
    return np.concatenate([dirs * r for r in shells])


def lyapunov_bmo_bound(u: GridSolution, spec: ProblemSpec, pair: LyapunovPair,
                       tol: float = DEFAULT_TOL) -> LyapunovBound:
    """Compare the full-window energy with sup_{|y| <= c} h(y) + k T.

    Integrating the Lyapunov inequality along Y gives
    E_t int_t^T |Z|^2 <= E_t h(Y_T) - h(Y_t) + k (T - t), and h >= 0.
    """
    measured = bmo_norm_fk(u, spec, tol=tol) ** 2
    radius = max(pair.c, sup_norm(u))
    hmax = float(np.max(pair.h(_ball_points(u.dim_u, radius))))
    bound = hmax + pair.k * u.grid.horizon
    return LyapunovBound(bound - measured, bound, measured)


# -- path increments -----------------------------------------------------------------

class IncrementFit(NamedTuple):
    exponent: float
    threshold: float
    passed: bool
    deltas: tuple
    moments: tuple


def increment_moment_check(bundle: PathBundle, alpha: float, delta: float | None = None,
                           levels: int = 5, weighted: bool = True) -> IncrementFit:
    """Fit E^Q |X_s - X_{s-delta}|^alpha against delta over a halving ladder ending at s = T."""
    live = ~np.asarray(bundle.escaped)
    if live.sum() < MIN_STRATUM:
        raise InsufficientPaths(f"only {int(live.sum())} live paths")
    x = np.asarray(bundle.x_paths)[live]
    if x.ndim == 2:
        x = x[..., None]
    steps = x.shape[1] - 1
    dt = float(bundle.t_nodes[1] - bundle.t_nodes[0])
    top = steps // 2 if delta is None else max(1, int(round(delta / dt)))
    lags = sorted({max(1, top >> j) for j in range(levels)}, reverse=True)
    if len(lags) < 2:
        raise DegenerateFit("delta ladder collapses to a single lag")
    w = np.ones(x.shape[0])
    if weighted and bundle.girsanov_logweight is not None:
        lw = np.asarray(bundle.girsanov_logweight)[live]
        w = np.exp(lw - lw.max())
    w = w / w.sum()
    moments = []
    for lag in lags:
        inc = np.linalg.norm(x[:, -1] - x[:, -1 - lag], axis=-1)
        moments.append(float(np.sum(w * inc ** alpha)))
    deltas = [lag * dt for lag in lags]
    slope = _loglog_slope(deltas, moments)
    threshold = alpha / 2 - EXPONENT_SLACK
    return IncrementFit(slope, threshold, slope >= threshold, tuple(deltas), tuple(moments))


# -- gradient ladder -----------------------------------------------------------------

def grad_sup(u: GridSolution) -> float:
    return float(np.max(np.linalg.norm(u.inner(u.du), axis=-1)))


class GradientCheck(NamedTuple):
    values: tuple
    median: float
    spread: float
    passed: bool


def gradient_bound_check(u: GridSolution | None, family: Sequence[GridSolution]) -> GradientCheck:
    """Max inner-box |Du| per member; bounded iff every value is at most twice the median.

    ``spread`` is (max - min) / max.  ``u``, when given, joins the family.
    """
    members = ([u] if u is not None else []) + list(family)
    if not members:
        raise ValueError("empty family")
    vals = np.array([grad_sup(m) for m in members])
    med = float(np.median(vals))
    top = float(vals.max())
    spread = (top - float(vals.min())) / top if top > 0 else 0.0
    return GradientCheck(tuple(float(v) for v in vals), med, spread, bool(top <= 2 * med + 1e-15))


# -- report --------------------------------------------------------------------------

@dataclass
class EstimateReport:
    sup_norm: float
    holder_alpha: float
    holder_seminorm: float
    grad_sup: float
    osc_beta: float
    osc_gamma: float
    osc_const: float
    terminal_gamma: float | None
    bmo_norm: float
    slice_exponent: float | None
    lyapunov_margin: float | None
    thresholds: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    _ROWS = ("sup_norm", "holder_alpha", "holder_seminorm", "grad_sup", "osc_beta", "osc_gamma",
             "osc_const", "terminal_gamma", "bmo_norm", "slice_exponent", "lyapunov_margin")

    def rows(self) -> list:
        """(name, value, threshold, pass) per estimate."""
        return [(name, getattr(self, name), self.thresholds.get(name), self.verdicts.get(name, True))
                for name in self._ROWS]

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pass"] = self.passed
        return out


def estimate_all(u: GridSolution, spec: ProblemSpec, *, epsilon: float = 1.0,
                 pair: LyapunovPair | None = None, tol: float = DEFAULT_TOL,
                 holder_budget: int = 3000, cylinders: int = 20) -> EstimateReport:
    """Run the grid-based estimates on one solution."""
    g = u.grid
    alpha = holder_alpha_fit(u, holder_budget)
    holder = holder_seminorm(u, alpha, holder_budget)
    osc = oscillation_decay_fit(u, default_cylinders(g, cylinders))
    thresholds, verdicts = {"osc_beta": 0.95, "holder_alpha": 0.0}, {}
    verdicts["osc_beta"] = osc.beta <= 0.95 and osc.min_slack >= 0
    verdicts["holder_alpha"] = 0 < alpha <= 1
    try:
        term = terminal_layer_check(u)
        thresholds["terminal_gamma"] = 0.4
        verdicts["terminal_gamma"] = term >= 0.4
    except DegenerateFit:
        term = None
    model = EnergyModel(u, spec, tol)
    bmo = model.norm((0.0, g.horizon))
    deltas = [g.horizon * 2.0 ** -j for j in range(3, 8) if g.horizon * 2.0 ** -j >= g.dt]
    slope = None
    if len(deltas) >= 4:
        try:
            fit = slice_exponent_check(u, spec, epsilon, deltas, tol)
            slope = fit.exponent
            thresholds["slice_exponent"] = fit.threshold
            verdicts["slice_exponent"] = fit.passed
        except DegenerateFit:
            slope = None
    margin = None
    if pair is not None:
        lb = lyapunov_bmo_bound(u, spec, pair, tol)
        margin = lb.margin
        thresholds["lyapunov_margin"] = 0.0
        verdicts["lyapunov_margin"] = margin >= 0
    meta = {"grid": g.params(), "cylinders": osc.cylinders, "holder_budget": holder_budget,
            "epsilon": epsilon, "holder_witness": holder.witness}
    return EstimateReport(sup_norm(u), alpha, holder.value, grad_sup(u), osc.beta, osc.gamma,
                          osc.const, term, bmo, slope, margin, thresholds, verdicts, meta)


def ladder_pairs(ks: Sequence[float], epss: Sequence[float]) -> list:
    return list(itertools.product(ks, epss))
