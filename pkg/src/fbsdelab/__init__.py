"""Quasilinear parabolic systems and quadratic FBSDEs: solvers, hypothesis checks, estimates."""

__version__ = "0.1.0"

from .errors import *  # noqa: E402,F401,F403
from .model import (FbsdeSpec, HypothesisConstants, Mode, ProblemSpec, SamplingBox,  # noqa: E402
                    mollify_driver, truncate_driver, validate_spec)
from .solver import Grid, GridSolution, solve, solve_system1, solve_system2_1d  # noqa: E402
from .fbsde import PathBundle, bsde_residual, simulate_forward, solve_fbsde, translate  # noqa: E402
from .presets import build_preset, list_presets  # noqa: E402
