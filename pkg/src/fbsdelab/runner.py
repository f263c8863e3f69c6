"""Scenario orchestration.

Stages run in a fixed order: validate, hypotheses, solve, simulate,
estimates, ladder.  Each enabled suite writes a CSV with columns
``name, value, threshold, pass``; everything lands in ``report.json``
("report-v1").  Timings, versions and file hashes go to ``manifest.json``
only, so the report and CSVs are byte-identical across reruns and worker
counts.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ScenarioConfig
from .containers import grid_slice_csv, path_sample_csv, write_grid_solution
from .errors import (DegenerateFit, LabError, PathEscape, PicardDivergence, SingularDiffusion,
                     StepRejected)
from .estimates import (bmo_norm_mc, estimate_all, gradient_bound_check, increment_moment_check,
                        sup_norm)
from .fbsde import bsde_residual, simulate_forward
from .model import mollify_driver, truncate_driver, validate_spec
from .presets import build_preset, check_declared
from .solver import Grid, solve

REPORT_SCHEMA = "report-v1"
MANIFEST_SCHEMA = "manifest-v1"
EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
RESIDUAL_THRESHOLD = 0.05
ESCAPE_THRESHOLD = 0.1
LADDER_SUP_SPREAD = 0.10
SAMPLE_PATHS = 10
_SOLVER_ERRORS = (PicardDivergence, StepRejected, SingularDiffusion)


def _clean(v):
    """JSON-safe scalar: non-finite floats become strings."""
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    return v


@dataclass
class StageResult:
    name: str
    status: str = "skipped"          # ok | failed | error | skipped
    rows: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    error: str | None = None

    def add(self, name, value, threshold=None, passed=True):
        self.rows.append((name, value, threshold, bool(passed)))

    @property
    def passed(self) -> bool:
        return self.status in ("ok", "skipped") and all(r[3] for r in self.rows)

    def close(self):
        if self.status == "skipped":
            self.status = "ok" if all(r[3] for r in self.rows) else "failed"

    def to_dict(self) -> dict:
        return {"status": self.status, "pass": self.passed, "error": self.error,
                "rows": [{"name": n, "value": _clean(v), "threshold": _clean(t), "pass": p}
                         for n, v, t, p in self.rows],
                "details": _clean(self.details)}


@dataclass
class RunManifest:
    config: dict
    files: dict
    versions: dict
    timings: dict
    verdict: dict
    exit_code: int
    workers: int
    started: str
    output_dir: str

    def to_dict(self) -> dict:
        return _clean(dataclasses.asdict(self)) | {"schema": MANIFEST_SCHEMA}


def _suite_csv(stage: StageResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "threshold", "pass"])
    for n, v, t, p in stage.rows:
        fmt = lambda x: "" if x is None else (repr(float(x)) if isinstance(x, (float, np.floating)) else x)
        w.writerow([n, fmt(v), fmt(t), "true" if p else "false"])
    return buf.getvalue()


def _versions() -> dict:
    import scipy
    import yaml
    return {"fbsdelab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _driver_vanishes(spec, box) -> bool:
    pts = box.points(spec.dim_u, spec.horizon)
    return bool(np.all(spec.eval_driver(pts.t, pts.x, pts.u, pts.p) == 0.0))


class _Run:
    def __init__(self, cfg: ScenarioConfig, workers: int):
        self.cfg, self.workers = cfg, workers
        params = dict(cfg.preset_params)
        if cfg.grid["horizon"] is not None:
            params["horizon"] = cfg.grid["horizon"]
        self.data = build_preset(cfg.preset, params)
        box = self.data.box
        over = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.box.items() if v is not None}
        self.box = dataclasses.replace(box, **over) if over else box
        self.dx = cfg.grid["dx"] or self.data.dx
        self.grid = Grid.from_box(self.box, self.dx, self.data.spec.horizon, cfg.grid["dt"])
        self.stages: dict[str, StageResult] = {}
        self.timings: dict[str, float] = {}
        self.solution = None
        self.bundle = None
        self.halt = None

    def stage(self, name):
        st = StageResult(name)
        self.stages[name] = st
        return st

    # -- stages ---------------------------------------------------------------

    def validate(self):
        st = self.stage("validate")
        rep = validate_spec(self.data.spec, self.box, self.data.consts)
        st.details = rep.to_dict()
        kinds = rep.kinds()
        st.add("issues", len(rep.issues), 0, rep.ok)
        if not rep.ok:
            st.status = "failed"
            if {"ellipticity", "nonfinite", "dimension"} & set(kinds):
                self.halt = "validation rejected the problem data; solve skipped"

    def hypotheses(self):
        st = self.stage("hypotheses")
        for v in check_declared(self.data):
            st.add(v.name, v.margin, 0.0, v.passed)
            st.details[v.name] = {"fitted_constant": v.fitted_constant,
                                  "worst_point": v.worst_point}

    def solve(self):
        st = self.stage("solver")
        sol = solve(self.data.spec, self.grid, self.cfg.solver["tol"], self.cfg.solver["scheme"])
        self.solution = sol
        st.add("residual_norm", sol.residual_norm, self.cfg.solver["tol"],
               sol.residual_norm <= self.cfg.solver["tol"])
        st.add("picard_max", max(sol.diagnostics["picard_iterations"]))
        if self.data.reference is not None:
            g = self.grid
            ref = np.stack([self.data.reference(np.full(g.size, t), g.nodes) for t in g.t_nodes])
            ref = ref.reshape(sol.u.shape)
            st.add("reference_error", float(np.max(np.abs(sol.inner(sol.u - ref)))))
        st.details = {"grid": self.grid.params(), "scheme": self.cfg.solver["scheme"]}

    def simulate(self):
        st = self.stage("paths")
        d = self.data
        n, seed = self.cfg.paths["n_paths"], self.cfg.paths["seed"]
        start = (0.0, d.fbsde.x0 if d.fbsde is not None else d.start)
        try:
            b = simulate_forward(self.solution, d.spec, start, n, seed, workers=self.workers)
        except PathEscape as exc:
            st.status, st.error = "failed", str(exc)
            return
        self.bundle = b
        st.add("escape_fraction", b.escape_fraction, ESCAPE_THRESHOLD,
               b.escape_fraction <= ESCAPE_THRESHOLD)
        if d.fbsde is not None:
            res = bsde_residual(b, d.fbsde)
            st.add("bsde_residual", res.residual_l2, RESIDUAL_THRESHOLD,
                   res.residual_l2 <= RESIDUAL_THRESHOLD)
            st.details["residual"] = res.to_dict()
        mc = bmo_norm_mc(b)
        st.add("bmo_norm_mc", mc.value)
        st.add("bmo_norm_mc_stderr", mc.stderr)
        try:
            inc = increment_moment_check(b, 1.0)
            st.add("increment_exponent", inc.exponent, inc.threshold, inc.passed)
        except DegenerateFit as exc:
            st.details["increment"] = str(exc)
        st.details["samples"] = min(SAMPLE_PATHS, n)

    def estimates(self):
        st = self.stage("estimates")
        d = self.data
        est = self.cfg.estimates
        rep = estimate_all(self.solution, d.spec, epsilon=est["epsilon"], pair=d.lyapunov,
                           tol=self.cfg.solver["tol"], holder_budget=est["holder_budget"],
                           cylinders=est["cylinders"])
        for name, value, threshold, passed in rep.rows():
            if name == "terminal_gamma" and not d.lipschitz_terminal:
                passed = True
            if name == "osc_beta" and not d.smooth:
                threshold, passed = None, True
            st.add(name, value, threshold, passed)
        if d.spec.dim_u == 1 and _driver_vanishes(d.spec, self.box):
            gap = rep.sup_norm - d.terminal_sup
            st.add("max_principle_gap", gap, 1e-8, gap <= 1e-8)
        st.details = {"metadata": rep.metadata}

    def ladder(self):
        st = self.stage("ladder")
        d = self.data
        lad = self.cfg.ladder
        grid = Grid.from_box(self.box, lad["dx"] or self.dx, d.spec.horizon,
                             self.cfg.grid["dt"] if lad["dx"] is None else None)
        members, sups = [], []
        for k in lad["k"]:
            for eps in (lad["eps"] or [None]):
                spec = truncate_driver(d.spec, k)
                if eps is not None:
                    spec = mollify_driver(spec, eps)
                sol = solve(spec, grid, self.cfg.solver["tol"], self.cfg.solver["scheme"])
                label = f"k={k:g}" + ("" if eps is None else f",eps={eps:g}")
                sups.append(sup_norm(sol))
                members.append(sol)
                st.add(f"sup_norm[{label}]", sups[-1])
        if members:
            top = max(sups)
            spread = (top - min(sups)) / top if top > 0 else 0.0
            st.add("sup_norm_spread", spread, LADDER_SUP_SPREAD, spread <= LADDER_SUP_SPREAD)
            grad = gradient_bound_check(None, members)
            st.add("grad_sup_spread", grad.spread)
            st.add("grad_sup_bounded", grad.spread, None, grad.passed)
            st.details = {"grad_sup": list(grad.values), "grid": grid.params()}


def _timed(run: _Run, name: str, fn):
    t0 = time.perf_counter()
    try:
        fn()
    finally:
        run.timings[name] = round(time.perf_counter() - t0, 6)


def run_scenario(cfg: ScenarioConfig, workers: int = 1, output: str | None = None) -> RunManifest:
    """Execute the scenario and write report, suite CSVs, artifacts and manifest."""
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    out = Path(output or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, workers)
    suites = set(cfg.suites)
    fatal = None

    _timed(run, "validate", run.validate)
    if "hypotheses" in suites:
        _timed(run, "hypotheses", run.hypotheses)
    if run.halt is None:
        try:
            _timed(run, "solve", run.solve)
        except _SOLVER_ERRORS as exc:
            fatal = f"{type(exc).__name__}: {exc}"
            run.stages["solver"].status, run.stages["solver"].error = "error", fatal
    else:
        fatal = run.halt
        run.stage("solver").error = run.halt
    if fatal is None:
        for name, fn in (("paths", run.simulate), ("estimates", run.estimates),
                         ("ladder", run.ladder)):
            if name not in suites:
                continue
            try:
                _timed(run, name, fn)
            except _SOLVER_ERRORS as exc:
                fatal = f"{type(exc).__name__}: {exc}"
                st = run.stages.setdefault(name, StageResult(name))
                st.status, st.error = "error", fatal
                break
            except LabError as exc:
                st = run.stages.setdefault(name, StageResult(name))
                st.status, st.error = "failed", f"{type(exc).__name__}: {exc}"
    for st in run.stages.values():
        if st.error is None:
            st.close()

    files = {}

    def emit(name, payload):
        path = out / name
        path.write_bytes(payload if isinstance(payload, bytes) else payload.encode("utf-8"))
        files[name] = sha256_file(path)

    for name, st in run.stages.items():
        if name != "validate" and (name in suites or name == "solver"):
            emit(f"{name}.csv", _suite_csv(st))
    if run.solution is not None:
        write_grid_solution(run.solution, out / "solution.gridsol")
        files["solution.gridsol"] = sha256_file(out / "solution.gridsol")
        emit("solution_t0.csv", grid_slice_csv(run.solution, 0))
    if run.bundle is not None:
        emit("paths_sample.csv", path_sample_csv(run.bundle, SAMPLE_PATHS))

    failed = [n for n, st in run.stages.items()
              if not st.passed and (n in suites or n in ("validate", "solver"))]
    code = EXIT_ERROR if fatal else (EXIT_FAIL if failed else EXIT_OK)
    verdict = {"pass": code == EXIT_OK, "exit_code": code, "failed_stages": failed, "halt": fatal}
    report = {"schema": REPORT_SCHEMA, "preset": cfg.preset, "config": _config_echo(cfg),
              "stages": {n: st.to_dict() for n, st in run.stages.items()}, "verdict": verdict}
    emit("report.json", json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")
    manifest = RunManifest(_config_echo(cfg), dict(sorted(files.items())), _versions(), run.timings,
                           verdict, code, workers, started, str(out))
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def _config_echo(cfg: ScenarioConfig) -> dict:
    echo = cfg.to_dict()
    echo.pop("output_dir")   # keeps reports identical across output locations
    return echo


def verify_manifest(directory) -> dict:
    """Recompute hashes of the files a manifest lists; returns {name: ok}."""
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    return {name: (d / name).exists() and sha256_file(d / name) == digest
            for name, digest in man["files"].items()}
