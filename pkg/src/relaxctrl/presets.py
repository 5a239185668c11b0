"""Registry of ready-made problems with documented parameter ranges and assumption flags.

Metadata flags per preset:

``semi_monotone``   constant a1 with (f(y1) - f(y2))(y1 - y2) <= a1 |y1 - y2|^2, or None
``differentiable``  all y-derivatives needed by the adjoint are available and correct
``autonomous``      f and the running cost do not depend on t
``orientor_convex`` the set of (cost bound, velocity) pairs is convex in z
``quadratic``       the reduced cost is quadratic along segments of weights (exact line search)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .control_space import Box, Grid, make_grid
from .errors import ConfigError
from .integrands import Factor, Polynomial, ScaledDerivative, Term
from .pde import CompositeCost, LocalCost, ParabolicProblem


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    builder: Callable[[Grid, dict], ParabolicProblem]
    params: dict            # name -> default
    ranges: dict            # name -> (lo, hi)
    grid: dict              # default grid spec
    dictionary: dict        # default dictionary spec
    meta: dict
    solver: dict = field(default_factory=dict)

    def resolve(self, overrides: dict | None = None) -> dict:
        p = dict(self.params)
        for k, v in (overrides or {}).items():
            if k not in p:
                raise ConfigError(f"preset {self.name!r} has no parameter {k!r}")
            lo, hi = self.ranges[k]
            if not (isinstance(v, (int, float)) and math.isfinite(v) and lo <= v <= hi):
                raise ConfigError(f"parameter {k!r}={v!r} outside documented range [{lo}, {hi}]")
            p[k] = float(v)
        return p

    def build(self, grid: Grid | None = None, **overrides) -> ParabolicProblem:
        if grid is None:
            grid = make_grid(**self.grid)
        prob = self.builder(grid, self.resolve(overrides))
        return replace(prob, meta={**self.meta, "preset": self.name, "solver": dict(self.solver)})

    def row(self) -> dict:
        return {"name": self.name, "description": self.description, **self.meta,
                "params": {k: {"default": v, "range": list(self.ranges[k])} for k, v in self.params.items()}}


def _tracking(q: float, beta: float, amp: float) -> Polynomial:
    # q/2 (y - amp sin)^2 + beta/2 z^2
    return Polynomial([Term(0.5 * q, y=(2,)), Term(-q * amp, y=(1,), sin=1),
                       Term(0.5 * q * amp * amp, sin=2), Term(0.5 * beta, z=(2,))])


def _terminal(weight: float, amp: float):
    if weight == 0.0:
        return None
    return Polynomial([Term(0.5 * weight, y=(2,)), Term(-weight * amp, y=(1,), sin=1),
                       Term(0.5 * weight * amp * amp, sin=2)])


_B = Box(((-1.0, 1.0),))


def _zeros(coords):
    return np.zeros(coords.shape[0])


def _build_lq(grid, p, density_wrap=None):
    dens = _tracking(p["q"], p["beta"], p["amp"])
    if density_wrap is not None:
        dens = density_wrap(dens)
    return ParabolicProblem(grid=grid, n_state=1, diffusion=p["kappa"], reaction=(Polynomial([Term(1.0, z=(1,))]),),
                            running=LocalCost(dens), terminal=_terminal(p["terminal"], p["amp"]),
                            initial=_zeros, control_set=_B, name="lq")


def _build_broken(grid, p):
    prob = _build_lq(grid, p, density_wrap=lambda d: ScaledDerivative(d, 1.5))
    return replace(prob, name="broken")


def _build_chatter(grid, p):
    dens = Polynomial([Term(p["q"], y=(2,)), Term(1.0, z=(4,)), Term(-2.0, z=(2,)), Term(1.0)])
    return ParabolicProblem(grid=grid, n_state=1, diffusion=1.0, reaction=(Polynomial([Term(1.0, z=(1,))]),),
                            running=LocalCost(dens), terminal=None, initial=_zeros, control_set=_B,
                            name="chatter")


def _build_convex(grid, p):
    dens = Polynomial([Term(p["q"], y=(2,)), Term(1.0, z=(2,))])
    return ParabolicProblem(grid=grid, n_state=1, diffusion=1.0, reaction=(Polynomial([Term(1.0, z=(1,))]),),
                            running=LocalCost(dens), terminal=None, initial=_zeros, control_set=_B,
                            name="convex")


def _build_nonautonomous(grid, p):
    dens = _tracking(p["q"], p["beta"], p["amp"])
    f = Polynomial([Term(1.0, z=(1,)), Term(1.0, t=1, z=(1,))])
    return ParabolicProblem(grid=grid, n_state=1, diffusion=1.0, reaction=(f,), running=LocalCost(dens),
                            terminal=None, initial=_zeros, control_set=_B, name="nonautonomous")


def _build_composite(grid, p):
    vol = grid.volume
    mean_gap = Polynomial([Term(1.0, y=(1,)), Term(-p["target"] / vol)])
    effort = Polynomial([Term(p["beta"], z=(2,))])
    state = Polynomial([Term(p["gamma"], y=(1,))])
    terms = (((Factor("square"), mean_gap),),
             ((Factor("identity"), effort), (Factor("exp_clip"), state)))
    mode = "atomwise" if p["atomwise"] >= 0.5 else "averaged"
    return ParabolicProblem(grid=grid, n_state=1, diffusion=1.0, reaction=(Polynomial([Term(1.0, z=(1,))]),),
                            running=CompositeCost(terms, mode), terminal=None, initial=_zeros, control_set=_B,
                            name="composite")


def _build_allen_cahn(grid, p):
    f = Polynomial([Term(p["r"], y=(1,)), Term(-p["r"], y=(3,)), Term(1.0, z=(1,))])
    dens = _tracking(p["q"], p["beta"], p["amp"])
    return ParabolicProblem(grid=grid, n_state=1, diffusion=p["kappa"], reaction=(f,), running=LocalCost(dens),
                            terminal=None, initial=lambda c: 0.1 * np.sin(np.pi * c[:, 0] / grid.extents[0]),
                            control_set=_B, name="allen_cahn")


_LQ_PARAMS = {"q": 1.0, "beta": 1e-3, "amp": 0.1, "terminal": 0.0, "kappa": 1.0}
_LQ_RANGES = {"q": (0.0, 1e3), "beta": (0.0, 1e2), "amp": (-10.0, 10.0), "terminal": (0.0, 1e3),
              "kappa": (1e-3, 1e2)}
_CONST3 = {"strategy": "constants", "count": 3}

PRESETS: dict[str, Preset] = {}


def _register(p: Preset) -> None:
    PRESETS[p.name] = p


_register(Preset(
    "lq", "linear f = z, quadratic tracking cost of a sine profile",
    _build_lq, dict(_LQ_PARAMS), dict(_LQ_RANGES),
    {"dim": 1, "nx": 16, "nt": 20, "T": 1.0}, dict(_CONST3),
    {"semi_monotone": 0.0, "differentiable": True, "autonomous": True, "orientor_convex": True,
     "quadratic": True}))

_register(Preset(
    "chatter", "f = z, nonconvex cost q y^2 + (z^2 - 1)^2 with zero initial state",
    _build_chatter, {"q": 1.0}, {"q": (0.0, 1e3)},
    {"dim": 1, "nx": 16, "nt": 40, "T": 1.0}, dict(_CONST3),
    {"semi_monotone": 0.0, "differentiable": True, "autonomous": True, "orientor_convex": False,
     "quadratic": True}))

_register(Preset(
    "composite", "product-form cost (mean(y) - target)^2 + int(beta z^2) * exp(int(gamma y))",
    _build_composite, {"target": 0.02, "beta": 1e-3, "gamma": 1.0, "atomwise": 0.0},
    {"target": (-10.0, 10.0), "beta": (0.0, 1e2), "gamma": (-10.0, 10.0), "atomwise": (0.0, 1.0)},
    {"dim": 1, "nx": 16, "nt": 20, "T": 1.0}, dict(_CONST3),
    {"semi_monotone": 0.0, "differentiable": True, "autonomous": True, "orientor_convex": False,
     "quadratic": False},
    solver={"step_rule": "armijo"}))

_register(Preset(
    "convex", "f = z with convex cost q y^2 + z^2",
    _build_convex, {"q": 1.0}, {"q": (0.0, 1e3)},
    {"dim": 1, "nx": 16, "nt": 40, "T": 1.0}, dict(_CONST3),
    {"semi_monotone": 0.0, "differentiable": True, "autonomous": True, "orientor_convex": True,
     "quadratic": True}))

_register(Preset(
    "nonautonomous", "f = (1 + t) z with quadratic tracking cost",
    _build_nonautonomous, {"q": 1.0, "beta": 1e-3, "amp": 0.1},
    {"q": (0.0, 1e3), "beta": (0.0, 1e2), "amp": (-10.0, 10.0)},
    {"dim": 1, "nx": 16, "nt": 20, "T": 1.0}, dict(_CONST3),
    {"semi_monotone": 0.0, "differentiable": True, "autonomous": False, "orientor_convex": True,
     "quadratic": True}))

_register(Preset(
    "allen_cahn", "bistable f = r (y - y^3) + z with tracking cost",
    _build_allen_cahn, {"r": 1.0, "q": 1.0, "beta": 1e-3, "amp": 0.1, "kappa": 1.0},
    {"r": (0.0, 10.0), "q": (0.0, 1e3), "beta": (0.0, 1e2), "amp": (-10.0, 10.0), "kappa": (1e-3, 1e2)},
    {"dim": 1, "nx": 16, "nt": 20, "T": 1.0}, dict(_CONST3),
    {"semi_monotone": 1.0, "differentiable": True, "autonomous": True, "orientor_convex": True,
     "quadratic": False},
    solver={"step_rule": "armijo"}))

_register(Preset(
    "broken", "lq with a deliberately wrong y-derivative of the cost (negative control)",
    _build_broken, dict(_LQ_PARAMS), dict(_LQ_RANGES),
    {"dim": 1, "nx": 16, "nt": 20, "T": 1.0}, dict(_CONST3),
    {"semi_monotone": 0.0, "differentiable": False, "autonomous": True, "orientor_convex": True,
     "quadratic": True}))


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


def build(name: str, grid: Grid | None = None, **overrides) -> ParabolicProblem:
    return get_preset(name).build(grid, **overrides)
