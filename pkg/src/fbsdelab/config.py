"""Scenario configuration: a YAML key-value tree with a fixed schema.

Defaults (``null`` means "take the preset's value"):

=================  ===========================================
key                default
=================  ===========================================
preset             required; a name or {name, params}
grid.dx            null (preset resolution)
grid.dt            null (equal to dx)
grid.horizon       null (preset horizon)
box.x_lo, x_hi     null (preset sampling box)
box.u_radius       null
box.p_radius       null
paths.n_paths      10000
paths.seed         42
suites             [hypotheses, solver, paths, estimates]
output_dir         "out"
ladder.k           [2, 4, 8, 16]
ladder.eps         []
ladder.dx          null (grid.dx)
solver.tol         1.0e-8
solver.scheme      euler
estimates.epsilon  1.0
estimates.holder_budget  3000
estimates.cylinders      20
=================  ===========================================

``OUTPUT_DIR`` in the environment replaces ``output_dir``; nothing else is
read from the environment.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import yaml

from .errors import ParseError, SchemaViolation
from .presets import get_preset
from .solver import SCHEMES

SUITES = ("hypotheses", "solver", "paths", "estimates", "ladder")

DEFAULTS = {
    "preset": None,
    "grid": {"dx": None, "dt": None, "horizon": None},
    "box": {"x_lo": None, "x_hi": None, "u_radius": None, "p_radius": None},
    "paths": {"n_paths": 10000, "seed": 42},
    "suites": ["hypotheses", "solver", "paths", "estimates"],
    "output_dir": "out",
    "ladder": {"k": [2.0, 4.0, 8.0, 16.0], "eps": [], "dx": None},
    "solver": {"tol": 1e-8, "scheme": "euler"},
    "estimates": {"epsilon": 1.0, "holder_budget": 3000, "cylinders": 20},
}


def _positive(key, v, integer=False, allow_none=True):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaViolation(key, f"expected a number, got {type(v).__name__}")
    if v <= 0:
        raise SchemaViolation(key, "must be positive")
    if integer:
        if int(v) != v:
            raise SchemaViolation(key, "must be an integer")
        return int(v)
    return float(v)


def _vector(key, v):
    if v is None:
        return None
    vals = v if isinstance(v, list) else [v]
    out = []
    for item in vals:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise SchemaViolation(key, "expected numbers")
        out.append(float(item))
    return out


def _number_list(key, v, positive=True):
    if not isinstance(v, list):
        raise SchemaViolation(key, "expected a list")
    return [_positive(key, item, allow_none=False) if positive else float(item) for item in v]


@dataclass
class ScenarioConfig:
    preset: str
    preset_params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["grid"]))
    box: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["box"]))
    paths: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["paths"]))
    suites: list = field(default_factory=lambda: list(DEFAULTS["suites"]))
    output_dir: str = DEFAULTS["output_dir"]
    ladder: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["ladder"]))
    solver: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["solver"]))
    estimates: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["estimates"]))

    def to_dict(self) -> dict:
        preset = (self.preset if not self.preset_params
                  else {"name": self.preset, "params": dict(self.preset_params)})
        return {"preset": preset, "grid": dict(self.grid), "box": dict(self.box),
                "paths": dict(self.paths), "suites": list(self.suites),
                "output_dir": self.output_dir, "ladder": copy.deepcopy(self.ladder),
                "solver": dict(self.solver), "estimates": dict(self.estimates)}

    def with_overrides(self, seed: int | None = None, output: str | None = None) -> "ScenarioConfig":
        out = copy.deepcopy(self)
        if seed is not None:
            out.paths["seed"] = int(seed)
        if output is not None:
            out.output_dir = str(output)
        return out


def _section(doc, name, validators):
    raw = doc.get(name, {})
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaViolation(name, "expected a mapping")
    out = copy.deepcopy(DEFAULTS[name])
    for key, val in raw.items():
        if key not in validators:
            raise SchemaViolation(f"{name}.{key}", "unknown key")
        out[key] = validators[key](f"{name}.{key}", val)
    return out


def _scheme(key, v):
    if v not in SCHEMES:
        raise SchemaViolation(key, f"expected one of {list(SCHEMES)}")
    return v


def _seed(key, v):
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise SchemaViolation(key, "expected a nonnegative integer")
    return int(v)


def config_from_dict(doc: dict, env: dict | None = None) -> ScenarioConfig:
    """Validate a parsed document and fill defaults."""
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise SchemaViolation("<root>", "expected a mapping at top level")
    for key in doc:
        if key not in DEFAULTS:
            raise SchemaViolation(str(key), "unknown key")
    if doc.get("preset") is None:
        raise SchemaViolation("preset", "required")
    preset = doc["preset"]
    params = {}
    if isinstance(preset, dict):
        for key in preset:
            if key not in ("name", "params"):
                raise SchemaViolation(f"preset.{key}", "unknown key")
        params = dict(preset.get("params") or {})
        preset = preset.get("name")
    if not isinstance(preset, str):
        raise SchemaViolation("preset", "expected a preset name")
    entry = get_preset(preset)
    for key, val in params.items():
        if key not in entry.defaults:
            raise SchemaViolation(f"preset.params.{key}", f"not a parameter of {preset}")
        params[key] = _positive(f"preset.params.{key}", val, allow_none=False)

    grid = _section(doc, "grid", {"dx": _positive, "dt": _positive, "horizon": _positive})
    box = _section(doc, "box", {"x_lo": _vector, "x_hi": _vector,
                                "u_radius": _positive, "p_radius": _positive})
    if (box["x_lo"] is None) != (box["x_hi"] is None):
        raise SchemaViolation("box", "x_lo and x_hi must be given together")
    if box["x_lo"] is not None:
        if len(box["x_lo"]) != len(box["x_hi"]) or any(a >= b for a, b in zip(box["x_lo"], box["x_hi"])):
            raise SchemaViolation("box", "need x_lo < x_hi componentwise")
    paths = _section(doc, "paths", {"n_paths": lambda k, v: _positive(k, v, integer=True, allow_none=False),
                                    "seed": _seed})
    suites = doc.get("suites", DEFAULTS["suites"])
    if not isinstance(suites, list) or not all(isinstance(s, str) for s in suites):
        raise SchemaViolation("suites", "expected a list of names")
    for s in suites:
        if s not in SUITES:
            raise SchemaViolation(f"suites.{s}", f"unknown suite; known: {list(SUITES)}")
    suites = [s for s in SUITES if s in suites]
    output_dir = doc.get("output_dir", DEFAULTS["output_dir"])
    if not isinstance(output_dir, str) or not output_dir:
        raise SchemaViolation("output_dir", "expected a path")
    if env.get("OUTPUT_DIR"):
        output_dir = env["OUTPUT_DIR"]
    ladder = _section(doc, "ladder", {"k": _number_list, "eps": _number_list, "dx": _positive})
    if any(e >= 1 for e in ladder["eps"]):
        raise SchemaViolation("ladder.eps", "mollification radii must lie in (0, 1)")
    solver = _section(doc, "solver", {"tol": lambda k, v: _positive(k, v, allow_none=False),
                                      "scheme": _scheme})
    est = _section(doc, "estimates", {
        "epsilon": lambda k, v: _positive(k, v, allow_none=False),
        "holder_budget": lambda k, v: _positive(k, v, integer=True, allow_none=False),
        "cylinders": lambda k, v: _positive(k, v, integer=True, allow_none=False)})
    if est["holder_budget"] < 1000:
        raise SchemaViolation("estimates.holder_budget", "must be at least 1000")
    return ScenarioConfig(preset, params, grid, box, paths, suites, output_dir, ladder, solver, est)


def load_config(text: str, env: dict | None = None) -> ScenarioConfig:
    """Parse and validate a YAML scenario document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (None, None)
        raise ParseError(str(exc.problem or exc), line, col) from exc
    except yaml.YAMLError as exc:
        raise ParseError(str(exc)) from exc
    if doc is None:
        doc = {}
    return config_from_dict(doc, env)


def load_config_file(path, env: dict | None = None) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return load_config(fh.read(), env)


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
