"""Acceptance criteria 1-11, each at its stated tolerance.

Every test prints one line "[PASS|FAIL] criterion N: ..." before asserting;
the lines are also collected into the pytest terminal summary.
"""

import json
import time

import numpy as np
import pytest

from fbsdelab.config import load_config
from fbsdelab.estimates import (bmo_norm_fk, bmo_norm_mc, default_cylinders, gradient_bound_check,
                                oscillation_decay_fit, slice_exponent_check, sup_norm,
                                terminal_layer_check)
from fbsdelab.fbsde import simulate_forward, solve_fbsde
from fbsdelab.hypotheses import (bf_decompose, check_bf_bounds, estimate_bf_constants,
                                 positively_spans)
from fbsdelab.model import mollify_driver, truncate_driver, validate_spec
from fbsdelab.presets import build_preset, preset_names
from fbsdelab.runner import _driver_vanishes, run_scenario
from fbsdelab.solver import Grid, GridSolution, solve, solve_system1

from conftest import ACCEPTANCE_LINES
from oracles import random_vector_sets, sphere_spans

SLOPE = 0.7


def record(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def sup_error(sol, reference):
    g = sol.grid
    ref = np.stack([reference(np.full(g.size, t), g.nodes) for t in g.t_nodes])
    return float(np.max(np.abs(sol.inner(sol.u - ref.reshape(sol.u.shape)))))


def solvable_presets():
    out = []
    for name in preset_names():
        data = build_preset(name)
        if validate_spec(data.spec, data.box, data.consts).ok:
            out.append(data)
    return out


@pytest.fixture(scope="module")
def heat():
    data = build_preset("heat1d")
    grid = Grid.from_box(data.box, 2 ** -7, 1.0, dt=2 ** -7)
    t0 = time.perf_counter()
    sol = solve_system1(data.spec, grid)
    return data, sol, time.perf_counter() - t0


@pytest.fixture(scope="module")
def line():
    grid = Grid.make((-4.0,), (4.0,), 2 ** -5, 1.0)
    spec = build_preset("heat1d").spec
    return GridSolution.from_function(grid, lambda t, x: SLOPE * x[:, :1]), spec


def test_criterion_01_heat_oracle(heat):
    data, sol, secs = heat
    err = sup_error(sol, data.reference)
    ok = record(1, err <= 1e-3 and secs <= 10.0,
                f"heat sup-error {err:.3e} (<= 1e-3), solve {secs:.2f} s (<= 10 s)")
    assert ok


def test_criterion_02_cole_hopf_oracle():
    data = build_preset("cole-hopf")
    grid = Grid.from_box(data.box, 2 ** -7, 1.0, dt=2 ** -7)
    err = sup_error(solve_system1(data.spec, grid, scheme="bdf2"), data.reference)
    euler = sup_error(solve_system1(data.spec, grid), data.reference)
    ok = record(2, err <= 1e-3,
                f"Cole-Hopf sup-error {err:.3e} with bdf2 (<= 1e-3); backward Euler {euler:.3e}")
    assert ok


def test_criterion_03_bf_decomposition():
    rng = np.random.default_rng(2024)
    m = 10_000
    worst_ulps, bounds_ok, checked = 0.0, True, []
    for name in preset_names():
        data = build_preset(name)
        spec = data.spec
        t = rng.uniform(0, spec.horizon, m)
        x = rng.uniform(-2, 2, (m, spec.dim_x))
        u = rng.uniform(-1, 1, (m, spec.dim_u))
        p = rng.normal(scale=2.0, size=(m, spec.dim_u, spec.dim_x))
        p[::10] = 0.0
        eps = data.consts.epsilon_bf
        fit = estimate_bf_constants(spec, eps, data.box)
        dec = bf_decompose(spec, max(fit.fitted_constant, 1e-300) * (1 + 1e-12), eps)
        f = spec.eval_driver(t, x, u, p)
        for i in range(spec.dim_u):
            err = np.abs(dec.reconstruct(i, t, x, u, p) - f[:, i])
            ulp = np.spacing(np.maximum(np.abs(f[:, i]), np.finfo(float).tiny))
            worst_ulps = max(worst_ulps, float(np.max(err / ulp)))
        if np.isfinite(fit.fitted_constant) and fit.passed:
            checked.append(name)
            bounds_ok &= check_bf_bounds(dec, data.box).passed
    ok = record(3, worst_ulps <= 8 and bounds_ok,
                f"reconstruction worst {worst_ulps:.1f} ulp (<= 8) over {len(preset_names())} presets; "
                f"bounds with fitted C_Q hold on {len(checked)} presets: {bounds_ok}")
    assert ok


def test_criterion_04_spanning_oracle():
    disagree, total = 0, 0
    for dim, seed in ((2, 11), (3, 12)):
        for vecs in random_vector_sets(50, dim, seed):
            total += 1
            disagree += positively_spans(vecs) != sphere_spans(vecs, directions=100_000, seed=total)
    ok = record(4, disagree == 0, f"{disagree} disagreements over {total} instances in R^2 and R^3")
    assert ok


def test_criterion_05_slicing_exponent(heat, line):
    data, sol, _ = heat
    deltas = [2.0 ** -j for j in range(3, 8)]
    fit = slice_exponent_check(sol, data.spec, 1.0, deltas)
    u, spec = line
    const = slice_exponent_check(u, spec, 1.0, deltas)
    rel = float(np.max(np.abs(np.array(const.norms) / (SLOPE * np.sqrt(deltas)) - 1)))
    ok = record(5, fit.exponent >= 1 / 3 - 0.05 and rel <= 0.01,
                f"heat exponent {fit.exponent:.3f} (>= {1 / 3 - 0.05:.3f}); "
                f"constant-Z closed form rel. error {rel:.1e} (<= 1%)")
    assert ok


def test_criterion_06_bmo_cross_validation(heat, line):
    data, sol, _ = heat
    fk = bmo_norm_fk(sol, data.spec)
    bundle = simulate_forward(sol, data.spec, (0.0, (0.0,)), 100_000, seed=42)
    mc = bmo_norm_mc(bundle)
    gap = abs(mc.value / fk - 1)
    u, spec = line
    fk_c = bmo_norm_fk(u, spec)
    mc_c = bmo_norm_mc(simulate_forward(u, spec, (0.0, (0.0,)), 10_000, seed=42))
    fk_rel = abs(fk_c / SLOPE - 1)
    mc_dev = abs(mc_c.value - SLOPE)
    ok = record(6, gap <= 0.10 and fk_rel <= 0.01 and mc_dev <= 3 * mc_c.stderr + 1e-12,
                f"heat FK {fk:.4f} vs MC {mc.value:.4f}+-{mc.stderr:.4f} (gap {gap:.1%} <= 10%); "
                f"constant Z: FK rel {fk_rel:.1e}, MC dev {mc_dev:.1e} <= 3*{mc_c.stderr:.1e} + 1e-12")
    assert ok


def test_criterion_07_fbsde_pipeline():
    data = build_preset("fbsde-quadratic")
    res = []
    t0 = time.perf_counter()
    for dt in (2 ** -9, 2 ** -10):
        grid = Grid.from_box(data.box, dt, data.spec.horizon)
        res.append(solve_fbsde(data.fbsde, grid, 10_000, seed=42).residual.residual_l2)
        if dt == 2 ** -9:
            secs = time.perf_counter() - t0
    ratio = res[0] / res[1]
    ok = record(7, res[0] <= 0.05 and ratio >= 1.3 and secs <= 60,
                f"residual {res[0]:.4f} at dt=2^-9 (<= 0.05), halving ratio {ratio:.3f} (>= 1.3), "
                f"pipeline {secs:.1f} s (<= 60 s)")
    assert ok


def test_criterion_08_max_principle():
    details, ok_all = [], True
    for data in solvable_presets():
        if data.spec.dim_u != 1 or not _driver_vanishes(data.spec, data.box):
            continue
        sol = solve(data.spec, Grid.from_box(data.box, data.dx, data.spec.horizon))
        gmax = float(np.max(np.abs(sol.u[-1])))
        good = sup_norm(sol) <= gmax + 1e-8
        ok_all &= good
        details.append(f"{data.name} {sup_norm(sol):.6f}<={gmax:.6f}")
    ab2 = build_preset("ab2-linear")
    grid = Grid.from_box(ab2.box, ab2.dx, ab2.spec.horizon)
    sups = [sup_norm(solve(truncate_driver(ab2.spec, k), grid)) for k in (2, 4, 8, 16)]
    spread = (max(sups) - min(sups)) / max(sups)
    ok = record(8, ok_all and spread <= 0.10,
                f"f=0 presets: {', '.join(details)}; AB2 ladder sup spread {spread:.2e} (<= 10%)")
    assert ok


def test_criterion_09_oscillation_and_terminal_layer():
    worst_beta, min_slack, fewest, terms = 0.0, np.inf, np.inf, {}
    for data in solvable_presets():
        sol = solve(data.spec, Grid.from_box(data.box, data.dx, data.spec.horizon))
        if data.smooth:
            cyls = default_cylinders(sol.grid)
            fit = oscillation_decay_fit(sol, cyls)
            worst_beta = max(worst_beta, fit.beta)
            min_slack = min(min_slack, fit.min_slack)
            fewest = min(fewest, len(cyls))
        if data.lipschitz_terminal:
            terms[data.name] = terminal_layer_check(sol)
    low = min(terms.values())
    ok = record(9, worst_beta <= 0.95 and min_slack >= 0 and fewest >= 20 and low >= 0.4,
                f"worst beta {worst_beta:.2f} (<= 0.95), min residual {min_slack:.2e} (>= 0), "
                f"{fewest} cylinders; min terminal exponent {low:.3f} (>= 0.4) over {len(terms)} presets")
    assert ok


def test_criterion_10_gradient_ladder():
    data = build_preset("cole-hopf")
    grid = Grid.make((-4.0,), (4.0,), 2 ** -5, 1.0)
    family = [solve(mollify_driver(truncate_driver(data.spec, k), eps), grid)
              for k in (2, 4, 8, 16) for eps in (0.1, 0.05)]
    chk = gradient_bound_check(None, family)
    ok = record(10, chk.spread <= 0.25 and chk.passed,
                f"Cole-Hopf (k, eps) ladder max|Du| in [{min(chk.values):.4f}, {max(chk.values):.4f}], "
                f"spread {chk.spread:.2e} (<= 25%)")
    assert ok


def test_criterion_11_determinism(tmp_path):
    cfg = load_config("preset: heat1d\nsuites: [hypotheses, solver, paths, estimates]\n", {})
    runs = {}
    for label, workers in (("a", 1), ("b", 1), ("c", 2), ("d", 4)):
        runs[label] = run_scenario(cfg, workers=workers, output=str(tmp_path / label))
    reports = [n for n in runs["a"].files if n.endswith((".csv", ".json"))]
    same = all((tmp_path / lab / n).read_bytes() == (tmp_path / "a" / n).read_bytes()
               for lab in runs for n in reports)
    same &= all(runs[lab].files == runs["a"].files for lab in runs)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    ok = record(11, same and manifest["exit_code"] == 0,
                f"{len(reports)} CSV/JSON reports byte-identical across 4 runs at workers 1, 1, 2, 4")
    assert ok
