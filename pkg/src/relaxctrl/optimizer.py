"""Conditional-gradient solver for relaxed controls and optimality diagnostics.

The linear subproblem of the conditional gradient method over a product of
simplices is solved by maximizing the Hamiltonian ``h = <f, chi> - phi`` per
time step (fine relaxation) or per time step and node (coarse relaxation).
Its optimality gap is the maximum-principle residual, summed with the time
step (and quadrature weights) as weights.

The default method is the pairwise variant: it keeps an explicit convex
combination of vertices (one atom index per row) and moves mass from the
worst active vertex to the Hamiltonian maximizer, which converges linearly on
these polytopes. The vanilla variant is kept for comparison.
"""

from __future__ import annotations

import copy
import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .control_space import ControlDictionary, Grid
from .errors import FeasibilityError
from .pde import (CompositeCost, ParabolicProblem, Sensitivities, StateTrajectory, AdjointTrajectory,
                  assemble_diffusion, evaluate_cost, sensitivities, solve_adjoint, solve_forward)
from .young_measures import RelaxedControl, SpaceTimeYoungMeasure

Control = Union[RelaxedControl, SpaceTimeYoungMeasure]

STEP_RULES = ("auto", "exact", "armijo", "harmonic")
METHODS = ("blockwise", "pairwise", "vanilla")


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 500
    mp_tolerance: float = 1e-6
    step_rule: str = "auto"
    method: str = "blockwise"
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_max_halvings: int = 40
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.mp_tolerance > 0:
            raise ValueError("mp_tolerance must be > 0")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.method != "vanilla" and self.step_rule == "harmonic":
            raise ValueError("the harmonic step rule is only defined for the vanilla method")
        if not (0 < self.armijo_c1 < 1 and 0 < self.armijo_shrink < 1):
            raise ValueError("Armijo parameters must lie in (0, 1)")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")

    def resolved_step_rule(self, problem: ParabolicProblem) -> str:
        if self.step_rule != "auto":
            return self.step_rule
        return "exact" if problem.meta.get("quadratic", False) else "armijo"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SolveReport:
    cost_history: list
    residual_history: list
    gap_history: list
    final_cost: float
    residual_profile: np.ndarray
    hamiltonian_profile: np.ndarray
    dispersion: float
    termination: str
    iterations: int
    step_rule: str
    method: str
    structure: str
    wall_time: float = 0.0
    restart_costs: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    @property
    def max_residual(self) -> float:
        return float(self.residual_history[-1]) if self.residual_history else math.nan

    def to_dict(self) -> dict:
        """JSON payload; wall time is left out so reruns compare byte for byte."""
        return {
            "kind": "solve_report",
            "termination": self.termination,
            "converged": self.converged,
            "iterations": self.iterations,
            "method": self.method,
            "step_rule": self.step_rule,
            "structure": self.structure,
            "final_cost": _num(self.final_cost),
            "max_residual": _num(self.max_residual),
            "cost_history": [_num(v) for v in self.cost_history],
            "residual_history": [_num(v) for v in self.residual_history],
            "gap_history": [_num(v) for v in self.gap_history],
            "residual_profile": [_num(v) for v in np.asarray(self.residual_profile).ravel()],
            "hamiltonian_profile": [_num(v) for v in self.hamiltonian_profile],
            "hamiltonian_dispersion": _num(self.dispersion),
            "restart_costs": [_num(v) for v in self.restart_costs],
        }

    def profiles_csv(self, grid: Grid) -> str:
        """Per-time residual (max over nodes for coarse controls) and Hamiltonian profiles."""
        res = np.asarray(self.residual_profile)
        if res.ndim > 1:
            res = res.max(axis=1)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t", "mp_residual", "hamiltonian"])
        for k, t in enumerate(grid.times):
            w.writerow([k, repr(float(t)), repr(float(res[k])), repr(float(self.hamiltonian_profile[k]))])
        return buf.getvalue()


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


# Hamiltonian ----------------------------------------------------------------------------

def _coarse(control) -> bool:
    return isinstance(control, SpaceTimeYoungMeasure)


def hamiltonian_table(problem: ParabolicProblem, control: Control, y: StateTrajectory,
                      chi: AdjointTrajectory, sens: Sensitivities | None = None) -> np.ndarray:
    """Hamiltonian per option: (nt, S) integrated for fine controls, (nt, N, S) pointwise for coarse ones.

    For composite costs the cost term is linearized through the factor
    derivatives at the current measure-averaged inner integrals.
    """
    if sens is None:
        sens = sensitivities(problem, y, control)
    grid = problem.grid
    chik = chi.values[:grid.nt]
    if _coarse(control):
        return np.einsum("ksxc,kxc->kxs", sens.f_options, chik) - sens.phi_options
    W = np.asarray(grid.weights)
    return np.einsum("ksxc,kxc,x->ks", sens.f_options, chik, W) - sens.phi_options


def hamiltonian(problem: ParabolicProblem, y: StateTrajectory, chi: AdjointTrajectory, k: int, atom: int,
                control: RelaxedControl) -> float:
    """Hamiltonian of atom ``atom`` at time step ``k`` (fine relaxation)."""
    return float(hamiltonian_table(problem, control, y, chi)[k, atom])


def pointwise_hamiltonian(problem: ParabolicProblem, y: StateTrajectory, chi: AdjointTrajectory, k: int,
                          z, node: int | None = None):
    """``f(t_k, x, y, z) . chi(t_k, x) - phi(t_k, x, y, z)`` at one node (or all nodes when ``node`` is None)."""
    if isinstance(problem.running, CompositeCost):
        raise ValueError("composite costs have no pointwise Hamiltonian")
    grid = problem.grid
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (problem.control_set.m,):
        raise ValueError(f"z must have {problem.control_set.m} components")
    t = grid.times[k]
    yk = y.values[k]
    zz = np.broadcast_to(z, (grid.n_nodes, z.size))
    f = np.stack([fi.value(t, grid, yk, zz) for fi in problem.reaction], axis=-1)
    val = np.sum(f * chi.values[k], axis=-1) - problem.running.density.value(t, grid, yk, zz)
    return val if node is None else float(val[node])


# linear minimization oracle -------------------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RELAXCTRL_THREADS", "1")))
    except ValueError:
        return 1


def _row_argmax(h2d: np.ndarray) -> np.ndarray:
    """Argmax per row with lowest-index ties; rows may be scanned in parallel chunks."""
    n = _threads()
    if n == 1 or h2d.shape[0] < 2 * n:
        return np.argmax(h2d, axis=1)
    chunks = np.array_split(np.arange(h2d.shape[0]), n)
    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(lambda idx: np.argmax(h2d[idx], axis=1), chunks))
    return np.concatenate(parts)


def lmo(problem: ParabolicProblem, y: StateTrajectory, chi: AdjointTrajectory, control: Control,
        table: np.ndarray | None = None) -> Control:
    """Vertex maximizing the Hamiltonian: a Dirac per time step (fine) or per time step and node (coarse)."""
    h = hamiltonian_table(problem, control, y, chi) if table is None else table
    S = h.shape[-1]
    idx = _row_argmax(h.reshape(-1, S)).reshape(h.shape[:-1])
    return _vertex_control(control, idx)


def _vertex_control(control: Control, idx: np.ndarray) -> Control:
    S = control.option_values.shape[0]
    X = np.zeros(idx.shape + (S,))
    np.put_along_axis(X, idx[..., None], 1.0, axis=-1)
    return _with_weights(control, X)


def _with_weights(control: Control, X: np.ndarray) -> Control:
    if _coarse(control):
        return SpaceTimeYoungMeasure(control.grid, control.control_set, control.support, X)
    return RelaxedControl(control.grid, control.dictionary, X)


# residuals ------------------------------------------------------------------------------

def mp_residual(problem: ParabolicProblem, control: Control, y: StateTrajectory, chi: AdjointTrajectory,
                table: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """``max_s h - <h, weights>`` per time step (fine) or per time step and node (coarse), and its max."""
    h = hamiltonian_table(problem, control, y, chi) if table is None else table
    W = np.asarray(control.weights)
    r = np.max(h, axis=-1) - np.sum(W * h, axis=-1)
    r = np.maximum(r, 0.0)
    return r, float(np.max(r))


def fw_gap(problem: ParabolicProblem, control: Control, y: StateTrajectory, chi: AdjointTrajectory,
           table: np.ndarray | None = None) -> float:
    """Frank-Wolfe gap ``<grad J, weights - vertex>`` of the current weights."""
    h = hamiltonian_table(problem, control, y, chi) if table is None else table
    G = _gradient_from_table(problem, control, h)
    W = np.asarray(control.weights)
    return float(np.sum(G * W) - np.sum(np.min(G, axis=-1)))


def _gradient_from_table(problem, control, h):
    grid = problem.grid
    if _coarse(control):
        return -grid.dt * np.asarray(grid.weights)[None, :, None] * h
    return -grid.dt * h


# vertex bookkeeping for the pairwise method --------------------------------------------

def decompose(X: np.ndarray) -> dict[tuple, float]:
    """Write row-stochastic weights (R, S) as a convex combination of vertices (one index per row).

    Uses the union of the per-row cumulative-sum breakpoints; each interval
    between consecutive breakpoints contributes one vertex.
    """
    R, S = X.shape
    cum = np.cumsum(X, axis=1)
    cum[:, -1] = 1.0
    bps = np.unique(np.concatenate([[0.0, 1.0], np.clip(cum.ravel(), 0.0, 1.0)]))
    out: dict[tuple, float] = {}
    for a, b in zip(bps[:-1], bps[1:]):
        if b - a <= 0.0:
            continue
        mid = 0.5 * (a + b)
        v = np.argmax(cum > mid, axis=1)
        key = tuple(int(i) for i in v)
        out[key] = out.get(key, 0.0) + float(b - a)
    return out


def _compose(active: dict[tuple, float], R: int, S: int) -> np.ndarray:
    X = np.zeros((R, S))
    rows = np.arange(R)
    for v, a in active.items():
        X[rows, np.asarray(v)] += a
    return X


# solver ---------------------------------------------------------------------------------

class _Objective:
    """Cost and gradient of the reduced problem as functions of the flattened weights (R, S)."""

    def __init__(self, problem: ParabolicProblem, template: Control):
        self.problem = problem
        self.template = template
        self.shape = np.asarray(template.weights).shape
        self.evals = 0

    def control(self, X2d: np.ndarray, checked: bool = True) -> Control:
        X = X2d.reshape(self.shape)
        if checked:
            return _with_weights(self.template, X)
        # affine extension off the simplex, used for Hessian-vector products
        ctrl = copy.copy(self.template)
        object.__setattr__(ctrl, "weights", X)
        return ctrl

    def __call__(self, X2d: np.ndarray):
        self.evals += 1
        ctrl = self.control(X2d)
        y = solve_forward(self.problem, ctrl)
        return evaluate_cost(self.problem, y, ctrl), y, ctrl

    def gradient(self, X2d: np.ndarray, checked: bool = True, y=None):
        """Return (G, y, chi, table, ctrl) at the weights ``X2d``."""
        ctrl = self.control(X2d, checked)
        if y is None:
            y = solve_forward(self.problem, ctrl)
        sens = sensitivities(self.problem, y, ctrl)
        chi = solve_adjoint(self.problem, y, ctrl, sens)
        h = hamiltonian_table(self.problem, ctrl, y, chi, sens)
        G = _gradient_from_table(self.problem, ctrl, h).reshape(X2d.shape)
        return G, y, chi, h, ctrl


def _line_search(obj: _Objective, X, D, J0, gd, gmax, rule, it, opts):
    """Return (gamma, J, y, ctrl) or None when no decrease was found."""
    if rule == "harmonic":
        g = min(gmax, 2.0 / (it + 2.0))
        J, y, c = obj(X + g * D)
        return g, J, y, c
    if rule == "exact":
        J1, y1, c1 = obj(X + gmax * D)
        if math.isfinite(J1):
            a = (J1 - J0 - gd * gmax) / (gmax * gmax)
            g = gmax if a <= 0 else min(gmax, -gd / (2.0 * a))
            if g == gmax:
                if J1 <= J0:
                    return g, J1, y1, c1
            elif g > 0:
                J, y, c = obj(X + g * D)
                if J <= J0:
                    return g, J, y, c
    g = gmax
    for _ in range(opts.armijo_max_halvings):
        J, y, c = obj(X + g * D)
        if math.isfinite(J) and J <= J0 + opts.armijo_c1 * g * gd:
            return g, J, y, c
        g *= opts.armijo_shrink
    return None


class _QuadraticModel:
    """Quadratic model of the reduced cost on the affine hull of the weights.

    For presets flagged ``quadratic`` the gradient is affine along directions
    with zero row sums, so its differences along the tangent basis
    ``e[r, s] - e[r, 0]`` (s >= 1) give the Hessian exactly (``tau = 1``).
    Otherwise small differences give a local (Newton) model.
    """

    max_size = 2000

    def __init__(self, obj: _Objective, X0, G0, tau: float = 1.0):
        R, S = X0.shape
        n = R * (S - 1)
        HB = np.empty((R * S, n))
        for j in range(n):
            r, s = divmod(j, S - 1)
            D = np.zeros_like(X0)
            D[r, s + 1] = tau
            D[r, 0] = -tau
            HB[:, j] = (obj.gradient(X0 + D, checked=False)[0] - G0).ravel() / tau
        K = self._bt(HB.reshape(R, S, n))
        self.K = 0.5 * (K + K.T)
        self.HB, self.X0, self.G0 = HB, X0.copy(), G0.copy()
        self.R, self.S = R, S

    @staticmethod
    def _bt(V):
        """Transpose of the tangent basis map applied to X-shaped arrays (leading dims R, S)."""
        out = V[:, 1:] - V[:, :1]
        return out.reshape((-1,) + V.shape[2:])

    def grad(self, X):
        u = (X - self.X0)[:, 1:].ravel()
        return self.G0 + (self.HB @ u).reshape(X.shape)

    def face_solve(self, X, mask):
        """Minimize the model over weights supported on ``mask`` (active-set method)."""
        R, S = self.R, self.S
        X = X.copy()
        mask = mask.copy()
        for _ in range(R * S + 1):
            cols = []
            for r in range(R):
                sup = np.flatnonzero(mask[r])
                for s in sup[1:]:
                    col = np.zeros((R, S - 1))
                    if s >= 1:
                        col[r, s - 1] += 1.0
                    if sup[0] >= 1:
                        col[r, sup[0] - 1] -= 1.0
                    cols.append(col.ravel())
            if not cols:
                break
            Zu = np.array(cols).T
            g = self._bt(self.grad(X))
            Kr = Zu.T @ self.K @ Zu
            gr = Zu.T @ g
            lam, V = np.linalg.eigh(Kr)
            flat = lam <= 1e-10 * max(float(lam[-1]), 1e-300)
            c = V.T @ gr
            if np.any(flat & (np.abs(c) > 1e-13 * max(float(np.max(np.abs(gr))), 1e-300))):
                # zero curvature with a nonzero slope: descend linearly up to the boundary
                d = -V[:, flat] @ c[flat] * 1e6
            else:
                d = -V[:, ~flat] @ (c[~flat] / lam[~flat])
            Du = (Zu @ d).reshape(R, S - 1)
            D = np.concatenate([-Du.sum(axis=1, keepdims=True), Du], axis=1)
            D[~mask] = 0.0
            neg = mask & (D < 0)
            ratio = np.where(neg, X / np.where(neg, -D, 1.0), np.inf)
            amax = float(np.min(ratio))
            if amax >= 1.0:
                X = X + D
                break
            X = X + amax * D
            hit = neg & (ratio <= amax * (1 + 1e-12) + 1e-300)
            X[hit] = 0.0
            mask &= ~hit
        X = np.clip(X, 0.0, None)
        return X / X.sum(axis=1, keepdims=True)


def _run(problem, template, X0, opts: SolveOptions):
    rule = opts.resolved_step_rule(problem)
    obj = _Objective(problem, template)
    R, S = X0.shape
    rows = np.arange(R)
    active = decompose(X0) if opts.method == "pairwise" else None
    X = _compose(active, R, S) if active is not None else X0.copy()
    J, y, ctrl = obj(X)
    if not math.isfinite(J):
        raise FeasibilityError("initial control produces a diverging state")
    corrective = opts.method == "blockwise" and rule != "harmonic" and R * (S - 1) <= _QuadraticModel.max_size
    exact_model = rule == "exact"
    model = None
    costs, resids, gaps = [], [], []
    termination = "max_iters"
    it = 0
    while True:
        G, y, chi, h, ctrl = obj.gradient(X, y=y)
        _, rmax = mp_residual(problem, ctrl, y, chi, table=h)
        gap = float(np.sum(G * X) - np.sum(np.min(G, axis=1)))
        costs.append(J)
        resids.append(rmax)
        gaps.append(gap)
        if rmax <= opts.mp_tolerance:
            termination = "converged"
            break
        if it >= opts.max_iters:
            break
        fw = _row_argmax(-G)
        if corrective:
            # fully corrective step: add the maximizers and re-optimize on the face
            if model is None or not exact_model:
                model = _QuadraticModel(obj, X, G, 1.0 if exact_model else 1e-6)
            mask = X > 0
            mask[rows, fw] = True
            Dc = model.face_solve(X, mask) - X
            slope = float(np.sum(G * Dc))
            g = 1.0
            accepted = False
            for _ in range(1 if exact_model else 30):
                Jc, yc, cc = obj(X + g * Dc)
                if Jc <= J + (0.0 if exact_model else opts.armijo_c1 * g * min(slope, 0.0)):
                    accepted = slope < 0 or Jc < J
                    break
                g *= opts.armijo_shrink
            if accepted:
                X = np.clip(X + g * Dc, 0.0, None)
                X /= X.sum(axis=1, keepdims=True)
                J, y, ctrl = obj(X)
                it += 1
                continue
        away = None
        if opts.method == "pairwise":
            scores = {v: float(np.sum(G[rows, np.asarray(v)])) for v in active}
            away = max(scores, key=lambda v: (scores[v], v))
            D = np.zeros_like(X)
            D[rows, fw] += 1.0
            D[rows, np.asarray(away)] -= 1.0
            gmax = active[away]
        elif opts.method == "blockwise":
            # per row, move the mass of the worst supported option to the maximizer
            away = np.argmax(np.where(X > 0, G, -np.inf), axis=1)
            mass = X[rows, away]
            D = np.zeros_like(X)
            D[rows, fw] += mass
            D[rows, away] -= mass
            gmax = 1.0
        else:
            V = np.zeros_like(X)
            V[rows, fw] = 1.0
            D = V - X
            gmax = 1.0
        gd = float(np.sum(G * D))
        if not gd < 0:
            termination = "stalled"
            break
        step = _line_search(obj, X, D, J, gd, gmax, rule, it, opts)
        if step is None:
            termination = "stalled"
            break
        g, J, y, ctrl = step
        if opts.method == "pairwise":
            fw_key = tuple(int(i) for i in fw)
            active[fw_key] = active.get(fw_key, 0.0) + g
            if g >= active[away]:
                del active[away]
            else:
                active[away] -= g
            X = _compose(active, R, S)
        else:
            X = X + g * D
            if opts.method == "blockwise" and g == gmax:
                X[rows, away] = np.where(fw != away, 0.0, X[rows, away])
            X = np.clip(X, 0.0, None)
            X /= X.sum(axis=1, keepdims=True)
        J, y, ctrl = obj(X)
        it += 1
    return dict(X=X, control=ctrl, y=y, chi=chi, table=h, costs=costs, resids=resids, gaps=gaps,
                termination=termination, iterations=it, rule=rule, evals=obj.evals)


def _template(problem: ParabolicProblem, options) -> Control:
    grid = problem.grid
    if isinstance(options, ControlDictionary):
        return RelaxedControl.uniform(grid, options.on_grid(grid))
    support = np.asarray(options, dtype=float)
    if support.ndim == 1:
        support = support[:, None]
    return SpaceTimeYoungMeasure.uniform(grid, problem.control_set, support)


def solve_relaxed(problem: ParabolicProblem, options, opts: SolveOptions | None = None,
                  initial: Control | None = None):
    """Minimize the relaxed cost over a dictionary (fine) or a support point set (coarse).

    ``options`` is a ``ControlDictionary`` or an array of support points (Z, m).
    Returns ``(control, state, adjoint, report)``.
    """
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    template = _template(problem, options) if initial is None else initial
    W0 = np.asarray(template.weights, dtype=float)
    S = W0.shape[-1]
    starts = [W0.reshape(-1, S)]
    rng = np.random.Generator(np.random.PCG64(opts.seed))
    for _ in range(opts.restarts):
        noise = rng.dirichlet(np.ones(S), size=starts[0].shape[0])
        starts.append(0.5 * starts[0] + 0.5 * noise)
    best = None
    restart_costs = []
    for X0 in starts:
        out = _run(problem, template, X0, opts)
        restart_costs.append(out["costs"][-1])
        if best is None or out["costs"][-1] < best["costs"][-1]:
            best = out
    ctrl, y, chi = best["control"], best["y"], best["chi"]
    profile, _ = mp_residual(problem, ctrl, y, chi, table=best["table"])
    H = hamiltonian_constancy(problem, ctrl, y, chi)
    report = SolveReport(
        cost_history=best["costs"], residual_history=best["resids"], gap_history=best["gaps"],
        final_cost=best["costs"][-1], residual_profile=profile, hamiltonian_profile=H["profile"],
        dispersion=H["dispersion"], termination=best["termination"], iterations=best["iterations"],
        step_rule=best["rule"], method=opts.method, structure="coarse" if _coarse(ctrl) else "fine",
        wall_time=time.perf_counter() - t0, restart_costs=restart_costs if opts.restarts else [])
    return ctrl, y, chi, report


# diagnostics ----------------------------------------------------------------------------

def hamiltonian_constancy(problem: ParabolicProblem, control: Control, y: StateTrajectory,
                          chi: AdjointTrajectory) -> dict:
    """Time profile of the measure-averaged augmented Hamiltonian ``<fbar - L y, chi> - phibar``.

    The diffusion term uses the implicit state ``y[k+1]``, matching the scheme.
    Returns ``profile``, ``dispersion = (max - min) / (1 + |mean|)`` and the
    ``autonomous`` flag (the quantity is only expected to be constant then).
    """
    grid = problem.grid
    sens = sensitivities(problem, y, control)
    h = hamiltonian_table(problem, control, y, chi, sens)
    W = np.asarray(control.weights)
    if _coarse(control):
        avg = np.einsum("kxs,kxs,x->k", W, h, np.asarray(grid.weights))
    else:
        avg = np.sum(W * h, axis=-1)
    Ly = np.zeros((grid.nt, grid.n_nodes, problem.n_state))
    for c, A in enumerate(problem.diffusion):
        L = assemble_diffusion(grid, A)
        Ly[:, :, c] = (L @ y.values[1:, :, c].T).T
    diff = np.einsum("kxc,kxc,x->k", Ly, chi.values[:grid.nt], np.asarray(grid.weights))
    profile = avg - diff
    dispersion = float((profile.max() - profile.min()) / (1.0 + abs(profile.mean())))
    return {"profile": profile, "dispersion": dispersion,
            "autonomous": bool(problem.meta.get("autonomous", not _time_dependent(problem)))}


def _time_dependent(problem) -> bool:
    run = problem.running
    parts = [run.density] if not isinstance(run, CompositeCost) else [h for p in run.terms for _, h in p]
    return any(f.time_dependent for f in problem.reaction) or any(h.time_dependent for h in parts)


@dataclass
class FilippovResult:
    selection: np.ndarray      # (nt,) atom index per step
    mismatch: np.ndarray       # (nt,) L2 distance of the selected atom's field to the averaged field
    cost_slack: np.ndarray     # (nt,) selected atom cost minus averaged cost
    admissible: np.ndarray     # (nt,) whether the selected atom satisfies the cost bound
    verdict: str               # "exact" or "best_effort"
    control: RelaxedControl

    @property
    def max_mismatch(self) -> float:
        return float(np.max(self.mismatch))

    def to_dict(self) -> dict:
        return {"selection": [int(v) for v in self.selection], "mismatch": [float(v) for v in self.mismatch],
                "cost_slack": [float(v) for v in self.cost_slack],
                "admissible": [bool(v) for v in self.admissible], "verdict": self.verdict}


def filippov_extract(problem: ParabolicProblem, control: RelaxedControl, y: StateTrajectory | None = None,
                     cost_rtol: float = 1e-9, match_tol: float = 1e-8) -> FilippovResult:
    """Replace each step's mixture by one atom with no larger cost and the closest reaction field.

    An atom is admissible at step k when its cost term is at most the averaged
    cost term plus ``cost_rtol * (1 + |averaged cost|)``. Among admissible atoms
    the one with the smallest L2 mismatch to the averaged field is chosen (lowest
    index on ties); when none is admissible the closest atom overall is reported.
    """
    if _coarse(control):
        raise ValueError("extraction is implemented for fine relaxed controls")
    if y is None:
        y = solve_forward(problem, control)
    prob = problem
    if isinstance(problem.running, CompositeCost):
        prob = replace(problem, running=CompositeCost(problem.running.terms, "atomwise"))
    sens = sensitivities(prob, y, control, derivatives=False)
    C = sens.phi_options                                   # (nt, S)
    Wt = np.asarray(control.weights)
    Cbar = np.sum(Wt * C, axis=1)
    F = sens.f_options                                     # (nt, S, N, n)
    Fbar = np.einsum("ks,ksxc->kxc", Wt, F)
    Wx = np.asarray(problem.grid.weights)
    mism = np.sqrt(np.einsum("ksxc,x->ks", (F - Fbar[:, None]) ** 2, Wx))
    allowed = C <= (Cbar + cost_rtol * (1.0 + np.abs(Cbar)))[:, None]
    any_allowed = allowed.any(axis=1)
    masked = np.where(allowed, mism, np.inf)
    sel = np.where(any_allowed, np.argmin(masked, axis=1), np.argmin(mism, axis=1))
    rows = np.arange(len(sel))
    mismatch = mism[rows, sel]
    slack = C[rows, sel] - Cbar
    exact = bool(np.all(any_allowed) and np.all(mismatch <= match_tol))
    return FilippovResult(sel, mismatch, slack, any_allowed, "exact" if exact else "best_effort",
                          RelaxedControl.dirac(control.grid, control.dictionary, sel))


def gradient_check(problem: ParabolicProblem, control: Control, eps: float = 1e-5,
                   directions: int | None = None, seed: int = 0) -> dict:
    """Compare adjoint directional derivatives with central differences.

    Directions move mass between atoms ``a`` and ``a+1`` of one row (all of them,
    or ``directions`` random tangent directions). The relative error uses
    ``max(|fd|, |adjoint|)`` with a floor of 1e-8 times the largest adjoint
    derivative, so exactly vanishing derivatives compare as equal.
    """
    y = solve_forward(problem, control)
    sens = sensitivities(problem, y, control)
    chi = solve_adjoint(problem, y, control, sens)
    h = hamiltonian_table(problem, control, y, chi, sens)
    G = _gradient_from_table(problem, control, h)
    W = np.asarray(control.weights, dtype=float)
    S = W.shape[-1]
    dirs = []
    if directions is None:
        for r in np.ndindex(W.shape[:-1]):
            for a in range(S):
                D = np.zeros_like(W)
                D[r + (a,)] = 1.0
                D[r + ((a + 1) % S,)] = -1.0
                dirs.append(D)
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        for _ in range(directions):
            D = rng.normal(size=W.shape)
            dirs.append(D - D.mean(axis=-1, keepdims=True))
    fd, ad = [], []
    for D in dirs:
        lo = np.min(np.where(D < 0, W / np.maximum(-D, 1e-300), np.inf))
        hi = np.min(np.where(D > 0, (1 - W) / np.maximum(D, 1e-300), np.inf))
        if min(lo, hi) < eps:
            raise ValueError("gradient check needs weights at least eps inside the simplex")
        jp = evaluate_cost(problem, *_fwd(problem, _with_weights(control, W + eps * D)))
        jm = evaluate_cost(problem, *_fwd(problem, _with_weights(control, W - eps * D)))
        fd.append((jp - jm) / (2 * eps))
        ad.append(float(np.sum(G * D)))
    fd, ad = np.array(fd), np.array(ad)
    floor = 1e-8 * max(float(np.max(np.abs(ad))), 1e-300)
    rel = np.abs(fd - ad) / np.maximum(np.maximum(np.abs(fd), np.abs(ad)), floor)
    return {"finite_difference": fd, "adjoint": ad, "relative_error": rel, "max_relative_error": float(rel.max())}


def _fwd(problem, ctrl):
    return solve_forward(problem, ctrl), ctrl
