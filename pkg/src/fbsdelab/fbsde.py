"""Four-step construction of FBSDE solutions from a solved decoupling field.

Convention: with ``p^i = Du^i`` the martingale integrand is ``Z^i = Sigma^T p^i``,
so ``dY^i = -F^i dt + Z^i . dB``.  For symmetric Sigma this is ``Sigma p^i``.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import PathEscape, SingularDiffusion
from .model import FbsdeSpec, Mode, ProblemSpec, SamplingBox
from .rng import normals
from .solver import DEFAULT_TOL, Grid, GridSolution, solve_system1

CHUNK = 4096
ESCAPE_LIMIT = 0.10


def _sigma_times(p: np.ndarray, sig: np.ndarray) -> np.ndarray:
    """z^i = Sigma^T p^i for p (N, n, d) and Sigma (N, d, d)."""
    d = sig.shape[-1]
    z = np.zeros(p.shape)
    for j in range(d):
        z += p[:, :, j:j + 1] * sig[:, None, j, :]
    return z


def translate(fbsde: FbsdeSpec, box: SamplingBox | None = None) -> ProblemSpec:
    """PDE data f^i = F^i(t,x,u,Sigma p) + p^i . H(t,x,u,Sigma p), sigma = Sigma, g = G.

    When a box is given, Sigma is checked for invertibility on it.
    """
    if box is not None:
        pts = box.points(fbsde.dim_y, fbsde.horizon)
        sig = fbsde.eval_diffusion(pts.t, pts.x, pts.u)
        sv = np.linalg.svd(sig, compute_uv=False)
        if not np.all(np.isfinite(sv)) or np.min(sv[:, -1]) <= 1e-12 * max(1.0, np.max(sv)):
            raise SingularDiffusion("Sigma is singular on the sampling box")

    def driver(t, x, u, p):
        z = _sigma_times(np.asarray(p, float), fbsde.eval_diffusion(t, x, u))
        h = fbsde.eval_drift(t, x, u, z)
        return fbsde.eval_generator(t, x, u, z) + np.einsum("nid,nd->ni", p, h)

    return ProblemSpec(fbsde.dim_x, fbsde.dim_y, fbsde.horizon, fbsde.diffusion, driver,
                       fbsde.terminal, Mode.SYSTEM1, source=fbsde)


@dataclass(frozen=True, eq=False)
class PathBundle:
    seed: int
    n_paths: int
    t_nodes: np.ndarray
    start_index: int
    x_paths: np.ndarray                 # (P, K+1, d)
    brownian_increments: np.ndarray     # (P, K, d)
    escaped: np.ndarray                 # (P,) bool
    y_paths: np.ndarray | None = None   # (P, K+1, n)
    z_paths: np.ndarray | None = None   # (P, K+1, n, d)
    girsanov_logweight: np.ndarray | None = None

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def escape_fraction(self) -> float:
        return float(np.mean(self.escaped))

    def replace(self, **changes) -> "PathBundle":
        return dataclasses.replace(self, **changes)

    def weights(self) -> np.ndarray:
        if self.girsanov_logweight is None:
            return np.ones(self.n_paths)
        return np.exp(self.girsanov_logweight)


class FieldSampler:
    """Multilinear interpolation of u and of its lattice gradient at one time level."""

    def __init__(self, sol: GridSolution):
        self.sol = sol
        self.grid = sol.grid

    def _clip(self, x):
        return np.clip(x, np.asarray(self.grid.x_lo), np.asarray(self.grid.x_hi))

    def _interp(self, table: np.ndarray, x: np.ndarray) -> np.ndarray:
        """table: (*lattice, m) -> values (N, m)."""
        x = self._clip(x)
        m = table.shape[-1]
        if self.grid.dim == 1:
            ax = self.grid.axes[0]
            return np.stack([np.interp(x[:, 0], ax, table[:, c]) for c in range(m)], axis=1)
        f = RegularGridInterpolator(self.grid.axes, table, method="linear")
        return f(x)

    def values(self, k: int, x: np.ndarray) -> np.ndarray:
        return self._interp(self.sol.u[k], x)

    def gradients(self, k: int, x: np.ndarray) -> np.ndarray:
        n, d = self.sol.dim_u, self.grid.dim
        flat = self.sol.du[k].reshape(self.grid.shape + (n * d,))
        return self._interp(flat, x).reshape(len(x), n, d)


def _chunks(n: int):
    return [(s, min(n, s + CHUNK)) for s in range(0, n, CHUNK)]


def _run_chunks(fn, n_paths: int, workers: int):
    parts = _chunks(n_paths)
    if workers <= 1 or len(parts) == 1:
        return [fn(a, b) for a, b in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), parts))


def simulate_forward(u: GridSolution, spec: ProblemSpec, start: tuple, n_paths: int, seed: int,
                     use_drift: bool | None = None, workers: int = 1) -> PathBundle:
    """Euler-Maruyama for X on the grid's time nodes, then decouple.

    With ``use_drift`` (default: ``spec`` came from :func:`translate`) the drift
    H(t, X, u, Sigma^T Du) is included; otherwise X follows the driftless dynamics.
    Paths that leave the lattice are stopped at the face and flagged.
    """
    grid = u.grid
    t0, x0 = start
    x0 = np.asarray(x0, float).reshape(grid.dim)
    k0 = int(round(t0 / grid.dt))
    if abs(k0 * grid.dt - t0) > 1e-9 or not 0 <= k0 < grid.steps:
        raise ValueError("start time must be a grid node before T")
    if np.any(x0 < np.asarray(grid.inner_lo)) or np.any(x0 > np.asarray(grid.inner_hi)):
        raise ValueError("start point must lie in the inner box")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    drift_on = spec.source is not None if use_drift is None else use_drift
    if drift_on and spec.source is None:
        raise ValueError("drift requested but this ProblemSpec carries no FBSDE source")
    sampler = FieldSampler(u)
    lo, hi = np.asarray(grid.x_lo), np.asarray(grid.x_hi)
    d, K, dt = grid.dim, grid.steps, grid.dt
    sq = np.sqrt(dt)

    def run(a, b):
        m = b - a
        x = np.empty((m, K + 1, d))
        db = np.zeros((m, K, d))
        x[:, :k0 + 1] = x0
        out = np.zeros(m, dtype=bool)
        for k in range(k0, K):
            t = np.full(m, grid.t_nodes[k])
            xk = x[:, k]
            y = sampler.values(k, xk)
            p = sampler.gradients(k, xk) if (drift_on or spec.mode is Mode.SYSTEM2) else None
            sig = spec.sigma_matrix(t, xk, y, p)
            inc = sq * normals(seed, k, a, b, d)
            inc[out] = 0.0
            db[:, k] = inc
            step = np.zeros((m, d))
            for j in range(d):
                step += sig[:, :, j] * inc[:, j:j + 1]
            if drift_on:
                z = _sigma_times(p, spec.source.eval_diffusion(t, xk, y))
                h = spec.source.eval_drift(t, xk, y, z)
                step += np.where(out[:, None], 0.0, h * dt)
            nxt = xk + step
            left = np.any((nxt < lo) | (nxt > hi), axis=1) & ~out
            nxt = np.clip(nxt, lo, hi)
            out |= left
            x[:, k + 1] = nxt
        return x, db, out

    parts = _run_chunks(run, n_paths, workers)
    bundle = PathBundle(seed=int(seed), n_paths=int(n_paths), t_nodes=grid.t_nodes.copy(),
                        start_index=k0, x_paths=np.concatenate([p[0] for p in parts]),
                        brownian_increments=np.concatenate([p[1] for p in parts]),
                        escaped=np.concatenate([p[2] for p in parts]))
    if bundle.escape_fraction > ESCAPE_LIMIT:
        raise PathEscape(f"{bundle.escape_fraction:.1%} of paths left the lattice "
                         f"[{list(grid.x_lo)}, {list(grid.x_hi)}]")
    return decouple_paths(u, spec, bundle, workers)


def decouple_paths(u: GridSolution, spec: ProblemSpec, bundle: PathBundle,
                   workers: int = 1) -> PathBundle:
    """Y_k = u(t_k, X_k) and Z_k = Sigma^T Du(t_k, X_k) along every path."""
    sampler = FieldSampler(u)
    grid = u.grid
    K, n, d = grid.steps, spec.dim_u, grid.dim

    def run(a, b):
        m = b - a
        y = np.zeros((m, K + 1, n))
        z = np.zeros((m, K + 1, n, d))
        for k in range(bundle.start_index, K + 1):
            xk = bundle.x_paths[a:b, k]
            t = np.full(m, grid.t_nodes[k])
            y[:, k] = sampler.values(k, xk)
            p = sampler.gradients(k, xk)
            z[:, k] = _sigma_times(p, spec.sigma_matrix(t, xk, y[:, k], p))
        return y, z

    parts = _run_chunks(run, bundle.n_paths, workers)
    return bundle.replace(y_paths=np.concatenate([p[0] for p in parts]),
                          z_paths=np.concatenate([p[1] for p in parts]))


@dataclass(frozen=True)
class ResidualReport:
    residual_l2: float
    residual_by_component: tuple
    dt_used: float
    paths_used: int
    y_sup: float
    z_sup: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"residual_by_component": list(self.residual_by_component)}


def bsde_residual(bundle: PathBundle, fbsde: FbsdeSpec) -> ResidualReport:
    """RMS over non-escaped paths of Y_0 - [G(X_T) + sum F dt - sum Z . dB]."""
    if bundle.y_paths is None or bundle.z_paths is None:
        raise ValueError("bundle is not decoupled")
    k0, dt = bundle.start_index, bundle.dt
    keep = ~bundle.escaped
    x, y, z, db = (bundle.x_paths[keep], bundle.y_paths[keep], bundle.z_paths[keep],
                   bundle.brownian_increments[keep])
    m = len(x)
    K = db.shape[1]
    acc = fbsde.eval_terminal(x[:, K])
    for k in range(k0, K):
        t = np.full(m, bundle.t_nodes[k])
        acc = acc + fbsde.eval_generator(t, x[:, k], y[:, k], z[:, k]) * dt
        acc = acc - np.sum(z[:, k] * db[:, k][:, None, :], axis=2)
    r = y[:, k0] - acc
    per = np.sqrt(np.mean(r ** 2, axis=0))
    total = float(np.sqrt(np.mean(np.sum(r ** 2, axis=1))))
    return ResidualReport(total, tuple(float(v) for v in per), dt, int(m),
                          float(np.max(np.abs(y))) if m else 0.0,
                          float(np.max(np.abs(z))) if m else 0.0)


def girsanov_weight(bundle: PathBundle, drift: Callable) -> PathBundle:
    """log E = sum a_k . dB_k - 1/2 sum |a_k|^2 dt with a_k = drift(t_k, X_k)."""
    k0, dt = bundle.start_index, bundle.dt
    K = bundle.brownian_increments.shape[1]
    logw = np.zeros(bundle.n_paths)
    for k in range(k0, K):
        t = np.full(bundle.n_paths, bundle.t_nodes[k])
        a = np.asarray(drift(t, bundle.x_paths[:, k]), float).reshape(bundle.n_paths, -1)
        logw = logw + np.sum(a * bundle.brownian_increments[:, k], axis=1) \
            - 0.5 * np.sum(a * a, axis=1) * dt
    return bundle.replace(girsanov_logweight=logw)


@dataclass(frozen=True, eq=False)
class FbsdeResult:
    solution: GridSolution
    bundle: PathBundle
    residual: ResidualReport

    def __iter__(self):
        return iter((self.solution, self.bundle, self.residual))


def solve_fbsde(fbsde: FbsdeSpec, grid: Grid, n_paths: int, seed: int,
                tol: float = DEFAULT_TOL, workers: int = 1) -> FbsdeResult:
    """translate -> solve_system1 -> simulate_forward (with drift) -> decouple -> residual."""
    spec = translate(fbsde)
    sol = solve_system1(spec, grid, tol)
    bundle = simulate_forward(sol, spec, (fbsde.t0, fbsde.x0), n_paths, seed,
                              use_drift=True, workers=workers)
    return FbsdeResult(sol, bundle, bsde_residual(bundle, fbsde))
