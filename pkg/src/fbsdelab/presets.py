"""Built-in problem catalogue.

Each preset bundles PDE data, declared constants, a sampling box, an optional
(b0, b) split, optional FBSDE data and the hypotheses it is designed to
satisfy.  Presets are looked up by name; there is no dynamic code loading.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SchemaViolation, UnknownPreset
from .hypotheses import (HypothesisVerdict, LyapunovPair, bf_decompose, check_ab1, check_ab2,
                         check_bf_bounds, check_hh, check_hq, check_lip1, check_reg, check_sigma,
                         estimate_bf_constants, exponential_pair, fbsde_problem, lyapunov_verify,
                         quadratic_pair)
from .model import (DriverSplit, FbsdeSpec, HypothesisConstants, Mode, ProblemSpec,
                    SamplingBox)

AXES_2 = ((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0))


@dataclass(frozen=True, eq=False)
class PresetData:
    name: str
    spec: ProblemSpec
    consts: HypothesisConstants
    box: SamplingBox
    hypotheses: tuple
    dx: float = 2.0 ** -7
    split: DriverSplit | None = None
    fbsde: FbsdeSpec | None = None
    c_h: float = 0.0
    lyapunov: LyapunovPair | None = None
    reference: Callable | None = None
    smooth: bool = True
    lipschitz_terminal: bool = True
    terminal_sup: float = 1.0
    start: tuple = (0.0,)
    tags: tuple = field(default_factory=tuple)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    hypotheses: tuple
    defaults: dict
    builder: Callable

    def build(self, params: dict | None = None) -> PresetData:
        merged = dict(self.defaults)
        for key, val in (params or {}).items():
            if key not in self.defaults:
                raise SchemaViolation(f"preset.params.{key}", f"not a parameter of {self.name}")
            merged[key] = float(val)
        return self.builder(**merged)

    def catalog_entry(self) -> dict:
        c = self.build().consts
        consts = {k: getattr(c, k) for k in ("c_sigma", "l_sigma", "c_f", "c_q", "epsilon_bf",
                                             "alpha0", "m_ab", "rho_ab")}
        consts["spanning_set"] = [list(v) for v in c.spanning_set]
        return {"name": self.name, "description": self.description,
                "hypotheses": list(self.hypotheses), "params": dict(self.defaults),
                "constants": consts}


def _col(v):
    return np.asarray(v, float).reshape(-1, 1)


def _unit_sigma(t, x, u):
    return np.broadcast_to(np.eye(x.shape[1]), (len(t), x.shape[1], x.shape[1]))


def _zero_driver(n):
    return lambda t, x, u, p: np.zeros((len(t), n))


# -- oracles ------------------------------------------------------------------

def heat_reference(horizon: float):
    def ref(t, x):
        return _col(np.exp(-(horizon - t) / 2.0) * np.sin(x[:, 0]))
    return ref


def cole_hopf_reference(horizon: float, terminal: Callable = np.sin, nodes: int = 80):
    """u = log E[exp(g(x + B_{T-t}))] by Gauss-Hermite quadrature."""
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()

    def ref(t, x):
        s = np.sqrt(np.maximum(horizon - np.asarray(t, float), 0.0))
        vals = np.exp(terminal(x[:, :1] + s[:, None] * z[None, :]))
        return _col(np.log(vals @ w))
    return ref


# -- builders -----------------------------------------------------------------

def _heat1d(horizon):
    spec = ProblemSpec(1, 1, horizon, _unit_sigma, _zero_driver(1), lambda x: np.sin(x))
    consts = HypothesisConstants(c_sigma=1.0, l_sigma=0.0, c_f=1.0, m_ab=1.0)
    split = DriverSplit(lambda t, x, u, p: np.zeros((len(t), 1)), _zero_driver(1))
    return PresetData("heat1d", spec, consts, SamplingBox((-4.0,), (4.0,), 1.0, 2.0),
                      ("H_sigma", "H_AB2", "H_BF", "H_Q", "H_Reg", "Lyapunov"),
                      split=split, lyapunov=quadratic_pair(1, c=1.0),
                      reference=heat_reference(horizon))


def _cole_hopf(horizon):
    spec = ProblemSpec(1, 1, horizon, _unit_sigma, lambda t, x, u, p: 0.5 * p[:, :, 0] ** 2,
                       lambda x: np.sin(x))
    consts = HypothesisConstants(c_sigma=1.0, l_sigma=0.0, c_f=0.5, c_q=0.5, rho_ab=0.0,
                                 m_ab=0.0, spanning_set=((1.0,), (-1.0,)))
    split = DriverSplit(lambda t, x, u, p: np.zeros((len(t), 1)),
                        lambda t, x, u, p: 0.5 * p[:, :, 0] ** 2)
    return PresetData("cole-hopf", spec, consts, SamplingBox((-4.0,), (4.0,), 1.0, 2.0),
                      ("H_sigma", "H_AB1", "H_BF", "H_Q", "H_Reg", "BF_bounds", "Lyapunov"),
                      split=split, lyapunov=exponential_pair(2.0, 0.0, 1.0),
                      reference=cole_hopf_reference(horizon))


def _bf_triangular_driver(t, x, u, p):
    p1, p2 = p[:, 0, 0], p[:, 1, 0]
    return np.stack([0.25 * p1 ** 2, 0.25 * p1 ** 2 + 0.5 * p2 * np.tanh(p1)], axis=1)


def _bf_triangular(horizon):
    spec = ProblemSpec(1, 2, horizon, _unit_sigma, _bf_triangular_driver,
                       lambda x: 0.5 * np.hstack([np.sin(x), np.cos(x)]))
    consts = HypothesisConstants(c_sigma=1.0, l_sigma=0.0, c_f=1.0, c_q=1.0, epsilon_bf=0.5)
    return PresetData("bf-triangular", spec, consts, SamplingBox((-4.0,), (4.0,), 1.0, 2.0),
                      ("H_sigma", "H_BF", "H_Q", "H_Reg", "BF_bounds"), terminal_sup=0.5)


def _ab1_sigma(t, x, u):
    return (1.0 + 0.25 * np.sin(u[:, 0])).reshape(-1, 1, 1)


def _ab1_b(t, x, u, p):
    return np.stack([0.25 * p[:, 0, 0] ** 2 + 0.5 * np.sin(u[:, 1]),
                     0.25 * p[:, 1, 0] ** 2 + 0.5 * np.cos(u[:, 0])], axis=1)


def _ab1_spanning(horizon):
    spec = ProblemSpec(1, 2, horizon, _ab1_sigma, _ab1_b,
                       lambda x: 0.5 * np.hstack([np.sin(x), np.cos(x)]))
    consts = HypothesisConstants(c_sigma=2.0, l_sigma=0.25, c_f=1.0, c_q=1.0, rho_ab=1.0,
                                 m_ab=0.0, spanning_set=((1.0, 0.0), (0.0, 1.0), (-1.0, -1.0)))
    split = DriverSplit(lambda t, x, u, p: np.zeros((len(t), 1)), _ab1_b)
    return PresetData("ab1-spanning", spec, consts, SamplingBox((-4.0,), (4.0,), 1.0, 2.0),
                      ("H_sigma", "H_AB1", "H_BF", "H_Q", "H_Reg", "BF_bounds"), split=split,
                      terminal_sup=0.5)


def _system2_tanh(horizon):
    spec = ProblemSpec(1, 1, horizon, lambda t, x, u, p: 1.0 + 0.25 * np.tanh(p[:, 0, 0]),
                       lambda t, x, u, p: 0.5 * np.sin(p[:, :, 0]) + 0.25 * np.cos(u),
                       lambda x: np.sin(x), Mode.SYSTEM2)
    consts = HypothesisConstants(c_sigma=2.0, l_sigma=0.25, c_f=1.0)
    return PresetData("system2-tanh", spec, consts, SamplingBox((-2.0,), (2.0,), 1.5, 2.0),
                      ("H1_sigma", "H1_Lip", "H_Reg"), dx=2.0 ** -5)


def _fbsde_parts():
    def drift(t, x, y, z):
        return np.tanh(z[:, 0, :])

    def diffusion(t, x, y):
        return (1.0 + 0.5 * np.sin(y[:, 0])).reshape(-1, 1, 1)

    def generator(t, x, y, z):
        zz = z[:, :, 0] ** 2 / 8.0
        return zz + np.stack([np.zeros(len(t)), 0.5 * np.sin(y[:, 0])], axis=1)

    def terminal(x):
        return 0.5 * np.hstack([np.sin(x), np.cos(x)])

    return drift, diffusion, generator, terminal


def _fbsde_quadratic(horizon):
    from .fbsde import translate

    drift, diffusion, generator, terminal = _fbsde_parts()
    fb = FbsdeSpec(1, 2, horizon, drift, diffusion, generator, terminal, x0=(0.0,))
    consts = HypothesisConstants(c_sigma=4.0, l_sigma=0.5, c_f=1.0, c_q=1.0, rho_ab=0.5,
                                 m_ab=0.0, spanning_set=AXES_2)
    split = DriverSplit(lambda t, x, u, p: np.zeros((len(t), 1)), generator)
    return PresetData("fbsde-quadratic", translate(fb), consts,
                      SamplingBox((-3.0,), (3.0,), 1.0, 2.0),
                      ("H_Sigma", "H_F", "H_H"), split=split, fbsde=fb, c_h=1.0,
                      terminal_sup=0.5)


def _ab2_linear(horizon):
    def b0(t, x, u, p):
        return 0.5 * np.tanh(p[:, 0, :])

    def b(t, x, u, p):
        return 0.25 * u + 0.25 * p[:, :, 0]

    def driver(t, x, u, p):
        return p[:, :, 0] * b0(t, x, u, p) + b(t, x, u, p)

    spec = ProblemSpec(1, 1, horizon, lambda t, x, u: (1.0 + 0.25 * np.cos(u[:, 0])).reshape(-1, 1, 1),
                       driver, lambda x: 1.5 * np.sin(2.0 * x))
    consts = HypothesisConstants(c_sigma=2.0, l_sigma=0.25, c_f=1.0, m_ab=0.5)
    return PresetData("ab2-linear", spec, consts, SamplingBox((-4.0,), (4.0,), 2.0, 4.0),
                      ("H_sigma", "H_AB2", "H_BF", "H_Q", "H_Reg"), split=DriverSplit(b0, b),
                      terminal_sup=1.5)


def _kink_terminal(horizon):
    spec = ProblemSpec(1, 1, horizon, _unit_sigma, _zero_driver(1), lambda x: np.abs(np.sin(x)))
    consts = HypothesisConstants(c_sigma=1.0, l_sigma=0.0, c_f=1.0, m_ab=1.0)
    split = DriverSplit(lambda t, x, u, p: np.zeros((len(t), 1)), _zero_driver(1))
    return PresetData("kink-terminal", spec, consts, SamplingBox((-4.0,), (4.0,), 1.0, 2.0),
                      ("H_sigma", "H_AB2", "H_BF", "H_Q"), split=split, smooth=False)


def _heat2d(horizon):
    spec = ProblemSpec(2, 1, horizon, _unit_sigma, _zero_driver(1),
                       lambda x: np.sin(x[:, :1]) * np.cos(x[:, 1:2]))
    consts = HypothesisConstants(c_sigma=1.0, l_sigma=0.0, c_f=1.0, m_ab=1.0)
    split = DriverSplit(lambda t, x, u, p: np.zeros((len(t), 2)), _zero_driver(1))

    def ref(t, x):
        return _col(np.exp(-(horizon - t)) * np.sin(x[:, 0]) * np.cos(x[:, 1]))

    return PresetData("heat2d", spec, consts,
                      SamplingBox((-2.0, -2.0), (2.0, 2.0), 1.0, 2.0, x_count=9, p_count=21),
                      ("H_sigma", "H_AB2", "H_BF", "H_Q", "H_Reg"), dx=2.0 ** -5, split=split,
                      reference=ref, start=(0.0, 0.0))


def _degenerate(horizon):
    spec = ProblemSpec(1, 1, horizon, lambda t, x, u: np.zeros((len(t), 1, 1)), _zero_driver(1),
                       lambda x: np.sin(x))
    consts = HypothesisConstants(c_sigma=1.0)
    return PresetData("degenerate-sigma", spec, consts, SamplingBox((-4.0,), (4.0,), 1.0, 2.0),
                      ("H_sigma",), tags=("negative-control",))


_REGISTRY = {p.name: p for p in [
    Preset("heat1d", "Heat equation, sigma = 1, f = 0, g = sin x.",
           ("H_sigma", "H_AB2", "H_BF", "H_Q", "H_Reg", "Lyapunov"), {"horizon": 1.0}, _heat1d),
    Preset("cole-hopf", "Scalar quadratic driver f = p^2/2, g = sin x; exact via Cole-Hopf.",
           ("H_sigma", "H_AB1", "H_BF", "H_Q", "H_Reg", "BF_bounds", "Lyapunov"),
           {"horizon": 1.0}, _cole_hopf),
    Preset("bf-triangular", "Two components, f^2 grows like |p^1|^2 (triangular BF, eps = 0.5).",
           ("H_sigma", "H_BF", "H_Q", "H_Reg", "BF_bounds"), {"horizon": 1.0}, _bf_triangular),
    Preset("ab1-spanning", "Two components with a three-vector positively spanning set.",
           ("H_sigma", "H_AB1", "H_BF", "H_Q", "H_Reg", "BF_bounds"), {"horizon": 1.0},
           _ab1_spanning),
    Preset("system2-tanh", "Gradient-dependent diffusion sigma = 1 + tanh(p)/4, Lipschitz f.",
           ("H1_sigma", "H1_Lip", "H_Reg"), {"horizon": 1.0}, _system2_tanh),
    Preset("fbsde-quadratic", "Coupled FBSDE: H = tanh(z^1), quadratic F, Sigma = 1 + sin(y^1)/2.",
           ("H_Sigma", "H_F", "H_H"), {"horizon": 1.0}, _fbsde_quadratic),
    Preset("ab2-linear", "Linear-growth split b0 = tanh(p)/2, b = (u + p)/4.",
           ("H_sigma", "H_AB2", "H_BF", "H_Q", "H_Reg"), {"horizon": 1.0}, _ab2_linear),
    Preset("kink-terminal", "Heat equation with Lipschitz terminal |sin x|.",
           ("H_sigma", "H_AB2", "H_BF", "H_Q"), {"horizon": 1.0}, _kink_terminal),
    Preset("heat2d", "Two-dimensional heat equation, exercises the split implicit solve.",
           ("H_sigma", "H_AB2", "H_BF", "H_Q", "H_Reg"), {"horizon": 1.0}, _heat2d),
    Preset("degenerate-sigma", "Negative control with sigma = 0; validation must reject it.",
           ("H_sigma",), {"horizon": 1.0}, _degenerate),
]}


def list_presets() -> list[dict]:
    return [p.catalog_entry() for p in _REGISTRY.values()]


def get_preset(name: str) -> Preset:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; known: {', '.join(sorted(_REGISTRY))}") from None


def build_preset(name: str, params: dict | None = None) -> PresetData:
    return get_preset(name).build(params)


def preset_names() -> list[str]:
    return list(_REGISTRY)


def check_declared(data: PresetData) -> list[HypothesisVerdict]:
    """Run every hypothesis the preset declares, in declaration order."""
    spec, c, box = data.spec, data.consts, data.box
    out = []
    for name in data.hypotheses:
        if name in ("H_sigma", "H1_sigma"):
            out.append(check_sigma(spec, c, box))
        elif name == "H_AB1":
            out.append(check_ab1(spec, c, box, data.split))
        elif name == "H_AB2":
            out.append(check_ab2(spec, c, box, data.split))
        elif name == "H_BF":
            out.append(estimate_bf_constants(spec, c.epsilon_bf, box, c.c_f))
        elif name == "BF_bounds":
            out.append(check_bf_bounds(bf_decompose(spec, c.c_q, c.epsilon_bf), box))
        elif name == "H_Q":
            out.append(check_hq(spec, c.c_f, box))
        elif name == "H_Reg":
            out.append(check_reg(spec, c, box))
        elif name == "H1_Lip":
            out.append(check_lip1(spec, c.c_f, box))
        elif name == "Lyapunov":
            out.append(lyapunov_verify(data.lyapunov, spec, box))
        elif name == "H_Sigma":
            out.append(_renamed(check_sigma(fbsde_problem(data.fbsde), c, box), "H_Sigma"))
        elif name == "H_F":
            prob = fbsde_problem(data.fbsde)
            ab = check_ab1 if c.spanning_set else check_ab2
            parts = [ab(prob, c, box, data.split),
                     estimate_bf_constants(prob, c.epsilon_bf, box, c.c_f),
                     check_hq(prob, c.c_f, box)]
            worst = min(parts, key=lambda v: v.margin)
            out.append(HypothesisVerdict("H_F", worst.margin, worst.fitted_constant,
                                         worst.worst_point,
                                         {f"{v.name}_margin": v.margin for v in parts}))
        elif name == "H_H":
            out.append(check_hh(data.fbsde, data.c_h, box, c.kappa))
        else:
            raise SchemaViolation("hypotheses", f"unknown hypothesis tag {name!r}")
    return out


def _renamed(v: HypothesisVerdict, name: str) -> HypothesisVerdict:
    return HypothesisVerdict(name, v.margin, v.fitted_constant, v.worst_point, v.details)
