"""Sampled verdicts for the structural hypotheses on (sigma, f) and (H, Sigma, F).

Every check evaluates the relevant inequality on the deterministic point set
of a :class:`SamplingBox` and reports the smallest constant that makes it hold
there (``fitted_constant``) together with the slack against the declared
constant (``margin``).  Lipschitz-type bounds are probed with one-block
difference quotients at pair distances 1e-2 and 1e-3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, SingularDiffusion, SpanningSetInvalid
from .model import (DriverSplit, FbsdeSpec, HypothesisConstants, Mode, ProblemSpec,
                    SamplePoints, SamplingBox)

PAIR_STEPS = (1e-2, 1e-3)
SPAN_MARGIN = 1e-10


@dataclass(frozen=True)
class HypothesisVerdict:
    name: str
    margin: float
    fitted_constant: float
    worst_point: dict | None = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.margin >= 0)

    def to_dict(self) -> dict:
        return {"name": self.name, "pass": self.passed, "margin": _num(self.margin),
                "worst_point": self.worst_point, "fitted_constant": _num(self.fitted_constant),
                "details": {k: _num(v) for k, v in self.details.items()}}


def _num(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return v


def _combine(name: str, parts: list[tuple[str, float, float, dict | None]],
             headline: str) -> HypothesisVerdict:
    """parts: (label, declared, fitted, witness).  Margin is the worst slack."""
    details = {}
    worst = None
    margin = math.inf
    fitted = 0.0
    for label, declared, value, witness in parts:
        details[f"fitted_{label}"] = float(value)
        slack = declared - value
        if not math.isfinite(value):
            slack = -math.inf
        if slack < margin or worst is None:
            margin, worst = slack, witness
        if label == headline:
            fitted = float(value)
    return HypothesisVerdict(name, float(margin), fitted, worst, details)


# -- geometry helpers ---------------------------------------------------------

def _norm_p(p: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(p.reshape(len(p), -1) ** 2, axis=1))


def _shift(pts: SamplePoints, block: str, j: int, h: float, horizon: float) -> SamplePoints:
    if block == "t":
        t = np.where(pts.t + h <= horizon, pts.t + h, pts.t - h)
        return SamplePoints(t, pts.x, pts.u, pts.p)
    if block == "x":
        x = pts.x.copy()
        x[:, j] += h
        return SamplePoints(pts.t, x, pts.u, pts.p)
    if block == "u":
        u = pts.u.copy()
        u[:, j] += h
        return SamplePoints(pts.t, pts.x, u, pts.p)
    p = pts.p.copy()
    flat = p.reshape(len(p), -1)
    flat[:, j] += h
    return SamplePoints(pts.t, pts.x, pts.u, flat.reshape(pts.p.shape))


def _block_size(block: str, pts: SamplePoints) -> int:
    return {"t": 1, "x": pts.x.shape[1], "u": pts.u.shape[1],
            "p": pts.p[0].size}[block]


def _max_quotient(fn: Callable[[SamplePoints], np.ndarray], pts: SamplePoints, blocks,
                  horizon: float, scale: Callable | None = None, power: float = 1.0):
    """Largest |fn(P') - fn(P)| / (scale(P, P') * |P - P'|^power) over one-block shifts."""
    base = fn(pts)
    best, where = 0.0, None
    for block in blocks:
        for j in range(_block_size(block, pts)):
            for h in PAIR_STEPS:
                moved = _shift(pts, block, j, h, horizon)
                diff = fn(moved) - base
                num = np.sqrt(np.sum(diff.reshape(len(pts), -1) ** 2, axis=1))
                gap = abs(h) if block != "t" else np.abs(moved.t - pts.t)
                den = np.asarray(gap, float) ** power
                if scale is not None:
                    den = den * scale(pts, moved)
                q = np.where(np.isfinite(num), num / den, np.inf)
                i = int(np.argmax(q))
                if q[i] > best or where is None:
                    best, where = float(q[i]), {**pts.row(i), "block": block, "coord": j,
                                                "step": float(h)}
    return best, where


def _max_ratio(num: np.ndarray, den: np.ndarray, pts: SamplePoints):
    r = np.where(np.isfinite(num), num / den, np.inf)
    i = int(np.argmax(r))
    return float(r[i]), pts.row(i)


# -- positive spanning --------------------------------------------------------

def positively_spans(vectors) -> bool:
    """True iff the origin lies strictly inside conv{a_m / |a_m|}.

    Decided by a single LP: maximise s subject to lambda_m >= s, sum lambda = 1,
    sum lambda_m a_m/|a_m| = 0.  Strict interiority also needs the vectors to
    span R^n, which is checked by rank.
    """
    try:
        a = np.array([np.asarray(v, float).ravel() for v in vectors])
    except ValueError as exc:
        raise DimensionMismatch("vectors have differing dimensions") from exc
    if a.ndim != 2 or len(a) == 0:
        raise DimensionMismatch("need a non-empty list of vectors")
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DimensionMismatch("vectors must be finite and nonzero")
    m, n = a.shape
    if m < n + 1 or np.linalg.matrix_rank(a) < n:
        return False
    unit = a / norms[:, None]
    # variables: lambda_1..lambda_m, s
    c = np.zeros(m + 1)
    c[-1] = -1.0
    a_eq = np.zeros((n + 1, m + 1))
    a_eq[:n, :m] = unit.T
    a_eq[n, :m] = 1.0
    b_eq = np.zeros(n + 1)
    b_eq[n] = 1.0
    a_ub = np.hstack([-np.eye(m), np.ones((m, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(m), A_eq=a_eq, b_eq=b_eq,
                  bounds=[(0, None)] * m + [(None, 1.0)], method="highs")
    return bool(res.status == 0 and -res.fun > SPAN_MARGIN)


# -- a-priori bound structure -------------------------------------------------

def _split_error(spec: ProblemSpec, split: DriverSplit, pts: SamplePoints,
                 b0: np.ndarray, b: np.ndarray) -> float:
    f = spec.eval_driver(pts.t, pts.x, pts.u, pts.p)
    recon = np.einsum("nid,nd->ni", pts.p, b0) + b
    return float(np.max(np.abs(recon - f) / (1.0 + np.abs(f))))


def _b0_growth(consts: HypothesisConstants, pts: SamplePoints, b0: np.ndarray):
    arg = np.linalg.norm(pts.u, axis=1) + _norm_p(pts.p)
    kap = np.asarray(consts.kappa(arg), float) * np.ones_like(arg)
    return _max_ratio(np.linalg.norm(b0, axis=1), 1.0 + kap, pts)


def check_ab1(spec: ProblemSpec, consts: HypothesisConstants, box: SamplingBox,
              split: DriverSplit) -> HypothesisVerdict:
    if not consts.spanning_set or not positively_spans(consts.spanning_set):
        raise SpanningSetInvalid("spanning set does not positively span R^n")
    a = np.array([np.asarray(v, float) for v in consts.spanning_set])
    if a.shape[1] != spec.dim_u:
        raise DimensionMismatch("spanning vectors must have dimension n")
    pts = box.points(spec.dim_u, spec.horizon)
    b0, b = split.eval(pts.t, pts.x, pts.u, pts.p, spec.dim_x, spec.dim_u)
    m0, w0 = _b0_growth(consts, pts, b0)
    ab = b @ a.T                                   # (N, M)
    ap = np.einsum("mi,nid->nmd", a, pts.p)        # (N, M, d)
    excess = ab - 0.5 * np.sum(ap ** 2, axis=2)
    i, m = np.unravel_index(int(np.argmax(excess)), excess.shape)
    rho = max(0.0, float(excess[i, m]))
    w1 = {**pts.row(int(i)), "vector": a[m].tolist()}
    err = _split_error(spec, split, pts, b0, b)
    parts = [("rho", consts.rho_ab, rho, w1), ("b0_growth", consts.m_ab, m0, w0),
             ("split_error", 1e-9, err, None)]
    return _combine("H_AB1", parts, "rho")


def check_ab2(spec: ProblemSpec, consts: HypothesisConstants, box: SamplingBox,
              split: DriverSplit) -> HypothesisVerdict:
    pts = box.points(spec.dim_u, spec.horizon)
    b0, b = split.eval(pts.t, pts.x, pts.u, pts.p, spec.dim_x, spec.dim_u)
    m0, w0 = _b0_growth(consts, pts, b0)
    den = 1.0 + np.linalg.norm(pts.u, axis=1) + _norm_p(pts.p)
    mb, wb = _max_ratio(np.max(np.abs(b), axis=1), den, pts)
    err = _split_error(spec, split, pts, b0, b)
    fitted = max(m0, mb)
    parts = [("m", consts.m_ab, fitted, wb if mb >= m0 else w0),
             ("split_error", 1e-9, err, None)]
    v = _combine("H_AB2", parts, "m")
    v.details.update(fitted_b_growth=mb, fitted_b0_growth=m0)
    return v


# -- Bensoussan-Frehse structure ----------------------------------------------

def _bf_pieces(p: np.ndarray, i: int, epsilon: float):
    """(|p^i| |p|, 1 + sum_{j<i} |p^j|^2 + |p|^(2-eps)) for component i."""
    pn = _norm_p(p)
    pin = np.linalg.norm(p[:, i, :], axis=1)
    lower = np.sum(p[:, :i, :] ** 2, axis=(1, 2)) if i > 0 else np.zeros(len(p))
    return pin * pn, 1.0 + lower + pn ** (2.0 - epsilon), pin, pn


def estimate_bf_constants(spec: ProblemSpec, epsilon: float, box: SamplingBox,
                          c_f: float = math.inf) -> HypothesisVerdict:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    pts = box.points(spec.dim_u, spec.horizon)
    f = spec.eval_driver(pts.t, pts.x, pts.u, pts.p)
    best, where = 0.0, None
    for i in range(spec.dim_u):
        cross, rest, _, _ = _bf_pieces(pts.p, i, epsilon)
        r, w = _max_ratio(np.abs(f[:, i]), cross + rest, pts)
        if r > best or where is None:
            best, where = r, {**w, "component": i}
    return _combine("H_BF", [("c_f", c_f, best, where)], "c_f")


@dataclass(frozen=True)
class BfDecomposition:
    """f^i = p^i . h^i + k^i with the explicit quotient formulas."""

    spec: ProblemSpec
    c_q: float
    epsilon_bf: float

    def _parts(self, i, t, x, u, p):
        p = np.asarray(p, float)
        f = self.spec.eval_driver(t, x, u, p)[:, i]
        cross, rest, pin, pn = _bf_pieces(p, i, self.epsilon_bf)
        return f, cross + rest, rest, pin, pn, p

    def h(self, i, t, x, u, p) -> np.ndarray:
        f, den, _, pin, pn, p = self._parts(i, t, x, u, p)
        on = pin > 0
        factor = np.where(on, (f / den) * pn / np.where(on, pin, 1.0), 0.0)
        return factor[:, None] * p[:, i, :]

    def k(self, i, t, x, u, p) -> np.ndarray:
        f, den, rest, *_ = self._parts(i, t, x, u, p)
        return (f / den) * rest

    def reconstruct(self, i, t, x, u, p) -> np.ndarray:
        p = np.asarray(p, float)
        return np.sum(p[:, i, :] * self.h(i, t, x, u, p), axis=1) + self.k(i, t, x, u, p)


def bf_decompose(spec: ProblemSpec, c_q: float, epsilon: float) -> BfDecomposition:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    return BfDecomposition(spec, float(c_q), float(epsilon))


def check_bf_bounds(dec: BfDecomposition, box: SamplingBox) -> HypothesisVerdict:
    """Sampled check of |h^i| <= C_Q (1 + |p|) and |k^i| <= C_Q (1 + lower + |p|^(2-eps))."""
    spec = dec.spec
    pts = box.points(spec.dim_u, spec.horizon)
    hmax, kmax, wh, wk = 0.0, 0.0, None, None
    for i in range(spec.dim_u):
        _, rest, _, pn = _bf_pieces(pts.p, i, dec.epsilon_bf)
        hn = np.linalg.norm(dec.h(i, pts.t, pts.x, pts.u, pts.p), axis=1)
        kn = np.abs(dec.k(i, pts.t, pts.x, pts.u, pts.p))
        r, w = _max_ratio(hn, 1.0 + pn, pts)
        if r > hmax or wh is None:
            hmax, wh = r, w
        r, w = _max_ratio(kn, rest, pts)
        if r > kmax or wk is None:
            kmax, wk = r, w
    return _combine("BF_bounds", [("h", dec.c_q, hmax, wh), ("k", dec.c_q, kmax, wk)], "h")


# -- regularity ---------------------------------------------------------------

def _driver_fn(spec: ProblemSpec):
    return lambda q: spec.eval_driver(q.t, q.x, q.u, q.p)


def _sigma_fn(spec: ProblemSpec):
    return lambda q: spec.sigma_matrix(q.t, q.x, q.u, q.p)


def check_hq(spec: ProblemSpec, c_f: float, box: SamplingBox) -> HypothesisVerdict:
    pts = box.points(spec.dim_u, spec.horizon)
    fn = _driver_fn(spec)
    cxu, wxu = _max_quotient(fn, pts, ("x", "u"), spec.horizon,
                             scale=lambda a, b: 1.0 + _norm_p(a.p) ** 2)
    cp, wp = _max_quotient(fn, pts, ("p",), spec.horizon,
                           scale=lambda a, b: 1.0 + _norm_p(a.p) + _norm_p(b.p))
    return _combine("H_Q", [("xu", c_f, cxu, wxu), ("p", c_f, cp, wp)],
                    "xu" if cxu >= cp else "p")


def check_sigma(spec: ProblemSpec, consts: HypothesisConstants,
                box: SamplingBox) -> HypothesisVerdict:
    """Two-sided ellipticity from extreme singular values plus the Lipschitz bound.

    In System2 mode the Lipschitz probe also moves p.
    """
    pts = box.points(spec.dim_u, spec.horizon)
    s = spec.sigma_matrix(pts.t, pts.x, pts.u, pts.p)
    finite = np.isfinite(s).all(axis=(1, 2))
    sv = np.linalg.svd(np.where(finite[:, None, None], s, 0.0), compute_uv=False)
    with np.errstate(divide="ignore"):
        cs = np.where(finite, np.maximum(sv[:, 0] ** 2, 1.0 / sv[:, -1] ** 2), np.inf)
    i = int(np.argmax(cs))
    c_fit, wc = float(cs[i]), pts.row(i)
    blocks = ("x", "u", "p") if spec.mode is Mode.SYSTEM2 else ("x", "u")
    l_fit, wl = _max_quotient(_sigma_fn(spec), pts, blocks, spec.horizon)
    name = "H1_sigma" if spec.mode is Mode.SYSTEM2 else "H_sigma"
    v = _combine(name, [("c_sigma", consts.c_sigma, c_fit, wc),
                        ("l_sigma", consts.l_sigma, l_fit, wl)], "c_sigma")
    return v


def check_reg(spec: ProblemSpec, consts: HypothesisConstants,
              box: SamplingBox) -> HypothesisVerdict:
    """Time-Hoelder continuity of sigma and f with exponent alpha0."""
    pts = box.points(spec.dim_u, spec.horizon)
    a0 = consts.alpha0
    ls, ws = _max_quotient(_sigma_fn(spec), pts, ("t",), spec.horizon, power=a0)
    lf, wf = _max_quotient(_driver_fn(spec), pts, ("t",), spec.horizon, power=a0)
    return _combine("H_Reg", [("sigma_time", consts.l_sigma, ls, ws),
                              ("driver_time", consts.c_f, lf, wf)], "driver_time")


def check_lip1(spec: ProblemSpec, c_f: float, box: SamplingBox) -> HypothesisVerdict:
    """Global Lipschitz continuity and linear growth of f."""
    pts = box.points(spec.dim_u, spec.horizon)
    lip, wl = _max_quotient(_driver_fn(spec), pts, ("x", "u", "p"), spec.horizon)
    f = spec.eval_driver(pts.t, pts.x, pts.u, pts.p)
    den = 1.0 + np.linalg.norm(pts.u, axis=1) + _norm_p(pts.p)
    grow, wg = _max_ratio(np.linalg.norm(f, axis=1), den, pts)
    return _combine("H1_Lip", [("lipschitz", c_f, lip, wl), ("growth", c_f, grow, wg)],
                    "lipschitz")


# -- Lyapunov pairs -----------------------------------------------------------

@dataclass(frozen=True)
class LyapunovPair:
    """h with its gradient and Hessian, the constant k and the radius c.

    ``h(y) -> (N,)``, ``grad(y) -> (N, n)``, ``hess(y) -> (N, n, n)``.
    """

    h: Callable
    grad: Callable
    hess: Callable
    k: float
    c: float
    dim: int = 1

    def __post_init__(self):
        if self.k < 0 or not self.c > 0:
            raise ValueError("need k >= 0 and c > 0")
        zero = np.zeros((1, self.dim))
        if abs(float(np.asarray(self.h(zero)).ravel()[0])) > 1e-12:
            raise ValueError("h(0) must vanish")
        if np.max(np.abs(np.asarray(self.grad(zero), float))) > 1e-12:
            raise ValueError("Dh(0) must vanish")

    def with_k(self, k: float) -> "LyapunovPair":
        return LyapunovPair(self.h, self.grad, self.hess, k, self.c, self.dim)


def quadratic_pair(dim: int, scale: float = 1.0, k: float = 0.0, c: float = 1.0) -> LyapunovPair:
    """h(y) = scale |y|^2."""
    return LyapunovPair(
        h=lambda y: scale * np.sum(np.asarray(y) ** 2, axis=1),
        grad=lambda y: 2.0 * scale * np.asarray(y, float),
        hess=lambda y: np.broadcast_to(2.0 * scale * np.eye(dim), (len(y), dim, dim)),
        k=k, c=c, dim=dim)


def exponential_pair(lam: float, k: float = 0.0, c: float = 1.0) -> LyapunovPair:
    """Scalar h(y) = e^{lam y} + e^{-lam y} - 2."""
    def h(y):
        y = np.asarray(y, float)[:, 0]
        return np.exp(lam * y) + np.exp(-lam * y) - 2.0

    def grad(y):
        y = np.asarray(y, float)
        return lam * (np.exp(lam * y) - np.exp(-lam * y))

    def hess(y):
        y = np.asarray(y, float)
        return (lam ** 2 * (np.exp(lam * y) + np.exp(-lam * y)))[:, :, None]

    return LyapunovPair(h, grad, hess, k, c, 1)


def _lyapunov_points(spec: ProblemSpec, box: SamplingBox, c: float) -> SamplePoints:
    pts = box.points(spec.dim_u, spec.horizon, u_radius=c)
    keep = np.linalg.norm(pts.u, axis=1) <= c * (1 + 1e-12)
    return pts.take(keep)


def _lyapunov_slack(pair: LyapunovPair, spec: ProblemSpec, pts: SamplePoints) -> np.ndarray:
    """LHS - |z|^2 at every sample, with z ranging over the p-points of the box."""
    z = pts.p
    sig = spec.sigma_matrix(pts.t, pts.x, pts.u, None)
    try:
        # z^i = sigma^T p^i  <=>  p^i = sigma^{-T} z^i
        p = np.linalg.solve(np.swapaxes(sig, 1, 2), np.swapaxes(z, 1, 2))
    except np.linalg.LinAlgError as exc:
        raise SingularDiffusion("sigma is not invertible on the box") from exc
    p = np.swapaxes(p, 1, 2)
    if not np.all(np.isfinite(p)):
        raise SingularDiffusion("sigma is not invertible on the box")
    f = spec.eval_driver(pts.t, pts.x, pts.u, p)
    hess = np.asarray(pair.hess(pts.u), float)
    grad = np.asarray(pair.grad(pts.u), float)
    n = spec.dim_u
    quad = np.zeros(len(pts))
    energy = np.zeros(len(pts))
    for i in range(n):
        for j in range(n):
            quad = quad + 0.5 * hess[:, i, j] * np.sum(z[:, i, :] * z[:, j, :], axis=1)
        energy = energy + np.sum(z[:, i, :] * z[:, i, :], axis=1)
    drift = np.zeros(len(pts))
    for i in range(n):
        drift = drift + grad[:, i] * f[:, i]
    return quad - drift - energy


def lyapunov_verify(pair: LyapunovPair, spec: ProblemSpec, box: SamplingBox) -> HypothesisVerdict:
    pts = _lyapunov_points(spec, box, pair.c)
    slack = _lyapunov_slack(pair, spec, pts)
    margin = slack + pair.k
    i = int(np.argmin(margin))
    need = max(0.0, float(-np.min(slack)))
    return HypothesisVerdict("Lyapunov", float(margin[i]), need,
                             {**pts.row(i), "z": pts.p[i].tolist()}, {"k": pair.k, "c": pair.c})


def find_exponential_lambda(spec: ProblemSpec, box: SamplingBox, c: float, k: float = 1.0,
                            lam0: float = 0.5, iters: int = 40) -> LyapunovPair:
    """Bisect the smallest lam for which the exponential pair verifies with constant k (n = 1)."""
    if spec.dim_u != 1:
        raise DimensionMismatch("the exponential family is only offered for n = 1")

    def ok(lam):
        return lyapunov_verify(exponential_pair(lam, k, c), spec, box).passed

    lo, hi = 0.0, lam0
    while not ok(hi):
        lo, hi = hi, 2.0 * hi
        if hi > 1e3:
            raise ValueError("no exponential Lyapunov pair found below lam = 1e3")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return exponential_pair(hi, k, c)


# -- FBSDE data ---------------------------------------------------------------

def fbsde_problem(fbsde: FbsdeSpec) -> ProblemSpec:
    """View (Sigma, F, G) as PDE data without translation, for reuse of the checks above."""
    return ProblemSpec(fbsde.dim_x, fbsde.dim_y, fbsde.horizon, fbsde.diffusion,
                       fbsde.generator, fbsde.terminal)


def check_hh(fbsde: FbsdeSpec, c_h: float, box: SamplingBox,
             kappa: Callable = lambda s: s) -> HypothesisVerdict:
    pts = box.points(fbsde.dim_y, fbsde.horizon)

    def fn(q):
        return fbsde.eval_drift(q.t, q.x, q.u, q.p)

    cxy, wxy = _max_quotient(fn, pts, ("x", "u"), fbsde.horizon,
                             scale=lambda a, b: 1.0 + _norm_p(a.p))
    cz, wz = _max_quotient(fn, pts, ("p",), fbsde.horizon)
    val = np.linalg.norm(fn(pts), axis=1)
    kap = np.abs(np.asarray(kappa(np.linalg.norm(pts.u, axis=1)), float))
    cg, wg = _max_ratio(val, 1.0 + kap + _norm_p(pts.p), pts)
    return _combine("H_H", [("xy", c_h, cxy, wxy), ("z", c_h, cz, wz), ("growth", c_h, cg, wg)],
                    "z")


def check_fbsde_hypotheses(fbsde: FbsdeSpec, consts: HypothesisConstants, box: SamplingBox,
                           split: DriverSplit, c_h: float) -> list[HypothesisVerdict]:
    """Verdicts for the diffusion, generator and drift conditions on the FBSDE data (H_Sigma, H_F, H_H)."""
    prob = fbsde_problem(fbsde)
    ab = check_ab1 if consts.spanning_set else check_ab2
    return [check_sigma(prob, consts, box),
            ab(prob, consts, box, split),
            estimate_bf_constants(prob, consts.epsilon_bf, box, consts.c_f),
            check_hq(prob, consts.c_f, box),
            check_hh(fbsde, c_h, box, consts.kappa)]
