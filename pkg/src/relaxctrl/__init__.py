"""Relaxed optimal control of semilinear parabolic equations.

Controls are relaxed either per time step, as probability weights over a
dictionary of control fields (``RelaxedControl``), or per time step and node,
as weights over support points of the control set (``SpaceTimeYoungMeasure``).
"""

from ._kernels import BACKEND
from .control_space import Box, ControlDictionary, ControlField, FinitePoints, Grid, build_dictionary, make_grid
from .errors import (ConfigError, DimensionError, FeasibilityError, GridError, MissingDerivativeError,
                     RelaxCtrlError)
from .optimizer import SolveOptions, SolveReport, filippov_extract, mp_residual, solve_relaxed
from .pde import ParabolicProblem, evaluate_cost, solve_adjoint, solve_forward
from .presets import PRESETS, get_preset
from .young_measures import RelaxedControl, SpaceTimeYoungMeasure, YoungSlice

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Box", "ConfigError", "ControlDictionary", "ControlField", "DimensionError", "FeasibilityError",
    "FinitePoints", "Grid", "GridError", "MissingDerivativeError", "PRESETS", "ParabolicProblem", "RelaxCtrlError",
    "RelaxedControl", "SolveOptions", "SolveReport", "SpaceTimeYoungMeasure", "YoungSlice", "build_dictionary",
    "evaluate_cost", "filippov_extract", "get_preset", "make_grid", "mp_residual", "solve_adjoint",
    "solve_forward", "solve_relaxed",
]
