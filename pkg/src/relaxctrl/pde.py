"""Semilinear parabolic state equation under relaxed controls, and its discrete adjoint.

State equation on a box with homogeneous Dirichlet data::

    dy/dt - div(A grad y) = f(t, x, y, z),   y(0) = y0,

discretized by central differences in space and the IMEX step

    (I + dt L) y[k+1] = y[k] + dt * fbar_k(y[k])

where ``fbar_k`` averages ``f`` over the control weights of step ``k``. The
running cost is integrated with the left rectangle rule at ``y[k]`` and the
terminal cost with the nodal quadrature weights.

The adjoint recursion is the exact transpose of that scheme. Its sign is chosen
so that the Hamiltonian ``<f, chi> - phi`` is maximized at the optimum, which
makes the terminal slice ``chi[nt] = -phi_T'(y[nt])``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _kernels
from .control_space import ControlSet, Grid
from .errors import DimensionError, MissingDerivativeError
from .integrands import Factor, Integrand
from .young_measures import RelaxedControl, SpaceTimeYoungMeasure

Control = Union[RelaxedControl, SpaceTimeYoungMeasure]


# running cost forms ------------------------------------------------------------

@dataclass(frozen=True)
class LocalCost:
    """Running cost ``int phi(t, x, y, z) dx`` with a pointwise density."""

    density: Integrand


@dataclass(frozen=True)
class CompositeCost:
    """Running cost ``sum_i prod_j F_ij(int h_ij(t, x, y, z) dx)``.

    ``mode="averaged"`` applies the factors to the measure average of the inner
    integrals. ``mode="atomwise"`` evaluates the product per atom and averages the
    results; it is only defined for the fine (per time step) relaxation.
    """

    terms: tuple
    mode: str = "averaged"

    def __post_init__(self):
        if self.mode not in ("averaged", "atomwise"):
            raise ValueError(f"unknown composite mode {self.mode!r}")
        terms = tuple(tuple((f if isinstance(f, Factor) else Factor(**f), h) for f, h in prod)
                      for prod in self.terms)
        object.__setattr__(self, "terms", terms)


RunningCost = Union[LocalCost, CompositeCost]


# problem -------------------------------------------------------------------------

def _as_diffusion(A, dim: int, n: int) -> tuple[np.ndarray, ...]:
    if isinstance(A, tuple):  # one tensor per state component
        if len(A) != n:
            raise DimensionError(f"need {n} diffusion tensors, got {len(A)}")
        mats = [np.asarray(a, dtype=float) for a in A]
    else:
        mats = [np.asarray(A, dtype=float)] * n
    out = []
    for a in mats:
        if a.ndim == 0:
            a = a * np.eye(dim)
        if a.shape != (dim, dim):
            raise DimensionError(f"diffusion tensor must be scalar or {dim}x{dim}, got shape {a.shape}")
        eig = np.linalg.eigvalsh(0.5 * (a + a.T))
        if not np.all(eig > 0):
            raise ValueError(f"diffusion tensor is not positive definite (symmetric eigenvalues {eig})")
        a = a.copy()
        a.setflags(write=False)
        out.append(a)
    return tuple(out)


@dataclass(frozen=True)
class ParabolicProblem:
    grid: Grid
    n_state: int
    diffusion: tuple
    reaction: tuple  # one Integrand per state component
    running: RunningCost
    terminal: Integrand | None
    initial: object  # nodal array (N, n) / (N,) or callable coords -> values
    control_set: ControlSet
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_state < 1:
            raise DimensionError("state dimension must be positive")
        if len(self.reaction) != self.n_state:
            raise DimensionError(f"need {self.n_state} reaction components, got {len(self.reaction)}")
        object.__setattr__(self, "diffusion", _as_diffusion(self.diffusion, self.grid.dim, self.n_state))
        object.__setattr__(self, "reaction", tuple(self.reaction))

    @property
    def y0(self) -> np.ndarray:
        init = self.initial
        v = init(self.grid.coords) if callable(init) else init
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape != (self.grid.n_nodes, self.n_state):
            raise DimensionError(f"initial state shape {v.shape} does not match "
                                 f"({self.grid.n_nodes}, {self.n_state})")
        return v

    @property
    def composite(self) -> bool:
        return isinstance(self.running, CompositeCost)

    def with_grid(self, grid: Grid) -> "ParabolicProblem":
        init = self.initial
        if not callable(init) and not grid.same_space(self.grid):
            raise DimensionError("a nodal initial state cannot be moved to a different spatial grid")
        return replace(self, grid=grid)


# spatial operator ------------------------------------------------------------------

def assemble_diffusion(grid: Grid, A) -> sp.csr_matrix:
    """Central-difference matrix of ``-div(A grad .)`` on interior nodes (Dirichlet rows removed)."""
    A = _as_diffusion(A, grid.dim, 1)[0]
    if grid.dim == 1:
        n = grid.nx[0] - 1
        c = A[0, 0] / grid.dx[0] ** 2
        return sp.diags([-c * np.ones(n - 1), 2 * c * np.ones(n), -c * np.ones(n - 1)], [-1, 0, 1],
                        format="csr")
    n0, n1 = grid.interior_shape
    h0, h1 = grid.dx
    I0, I1 = sp.identity(n0), sp.identity(n1)
    D0 = sp.diags([np.ones(n0 - 1), -2 * np.ones(n0), np.ones(n0 - 1)], [-1, 0, 1]) / h0 ** 2
    D1 = sp.diags([np.ones(n1 - 1), -2 * np.ones(n1), np.ones(n1 - 1)], [-1, 0, 1]) / h1 ** 2
    L = -(A[0, 0] * sp.kron(I1, D0) + A[1, 1] * sp.kron(D1, I0))
    mixed = A[0, 1] + A[1, 0]
    if mixed != 0.0:
        C0 = sp.diags([-np.ones(n0 - 1), np.ones(n0 - 1)], [-1, 1]) / (2 * h0)
        C1 = sp.diags([-np.ones(n1 - 1), np.ones(n1 - 1)], [-1, 1]) / (2 * h1)
        L = L - mixed * sp.kron(C1, C0)
    return sp.csr_matrix(L)


class _StepOperator:
    """Factorized ``M = I + dt L`` and its weighted transpose ``W^-1 M^T W``."""

    def __init__(self, grid: Grid, A, dt: float):
        L = assemble_diffusion(grid, A)
        n = L.shape[0]
        M = (sp.identity(n, format="csr") + dt * L).tocsr()
        w = np.asarray(grid.weights)
        Mt = (sp.diags(1.0 / w) @ M.T @ sp.diags(w)).tocsr()
        self.tridiagonal = grid.dim == 1
        if self.tridiagonal:
            self.fwd = self._thomas(M)
            self.adj = self._thomas(Mt)
        else:
            self._lu = splu(M.tocsc())
            self._lu_adj = splu(Mt.tocsc())

    @staticmethod
    def _thomas(M):
        diag = np.ascontiguousarray(M.diagonal(0))
        sub = np.zeros_like(diag)
        sup = np.zeros_like(diag)
        sub[1:] = M.diagonal(-1)
        sup[:-1] = M.diagonal(1)
        inv, cp = _kernels.thomas_factor(sub, diag, sup)
        return sub, inv, cp

    def solve(self, rhs, adjoint: bool = False) -> np.ndarray:
        rhs = np.ascontiguousarray(rhs, dtype=float)
        if self.tridiagonal:
            sub, inv, cp = self.adj if adjoint else self.fwd
            return _kernels.thomas_solve(sub, inv, cp, rhs)
        return (self._lu_adj if adjoint else self._lu).solve(rhs)

    def sweep(self, y0, coef, source, dt, adjoint: bool = False):
        sub, inv, cp = self.adj if adjoint else self.fwd
        return _kernels.imex_sweep(sub, inv, cp, np.ascontiguousarray(y0, dtype=float),
                                   np.ascontiguousarray(coef, dtype=float),
                                   np.ascontiguousarray(source, dtype=float), float(dt))


_OPERATOR_CACHE: dict = {}


def _operators(problem: ParabolicProblem) -> list[_StepOperator]:
    out = []
    for A in problem.diffusion:
        key = (problem.grid.dim, problem.grid.nx, problem.grid.extents, problem.grid.dt, A.tobytes())
        op = _OPERATOR_CACHE.get(key)
        if op is None:
            if len(_OPERATOR_CACHE) > 64:
                _OPERATOR_CACHE.clear()
            op = _StepOperator(problem.grid, A, problem.grid.dt)
            _OPERATOR_CACHE[key] = op
        out.append(op)
    return out


# control access ------------------------------------------------------------------------

class _ControlView:
    """Uniform access to fine (nt, S) and coarse (nt, N, S) control weights."""

    def __init__(self, problem: ParabolicProblem, control: Control):
        grid = problem.grid
        if not control.grid.same_space(grid) or control.grid.nt != grid.nt or control.grid.T != grid.T:
            raise DimensionError("control grid does not match the problem grid")
        self.coarse = isinstance(control, SpaceTimeYoungMeasure)
        self.options = np.asarray(control.option_values, dtype=float)  # (S, N, m)
        self.weights = np.asarray(control.weights, dtype=float)
        if self.options.shape[-1] != problem.control_set.m:
            raise DimensionError("control dimension does not match the control set")

    @property
    def S(self) -> int:
        return self.options.shape[0]

    def average(self, vals, k=None) -> np.ndarray:
        """Average option values over the weights.

        ``vals`` is (nt, S, N, ...) when ``k`` is None, else (S, N, ...).
        """
        if k is None:
            if self.coarse:
                return np.einsum("kxs,ksx...->kx...", self.weights, vals)
            return np.einsum("ks,ksx...->kx...", self.weights, vals)
        if self.coarse:
            return np.einsum("xs,sx...->x...", self.weights[k], vals)
        return np.tensordot(self.weights[k], vals, axes=(0, 0))


def average_field(problem: ParabolicProblem, t: float, y_slice, control: Control, k: int) -> np.ndarray:
    """Measure-averaged reaction term at step ``k`` and state ``y_slice``, shape (N, n)."""
    view = _ControlView(problem, control)
    y = _state_slice(problem, y_slice)
    vals = np.stack([f.value(t, problem.grid, y, view.options) for f in problem.reaction], axis=-1)
    return view.average(vals, k)


def _state_slice(problem, y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != (problem.grid.n_nodes, problem.n_state):
        raise DimensionError(f"state slice shape {y.shape} does not match the problem")
    return y


def _eval_all(h: Integrand, problem, Y, view: _ControlView, deriv: bool = False) -> np.ndarray:
    """Evaluate ``h`` (or its y-derivative) at every (t_k, y_k, option), k < nt.

    Returns (nt, S, N) or, with ``deriv``, (nt, S, N, n).
    """
    grid = problem.grid
    nt = grid.nt
    t = grid.times[:, None, None]
    y = Y[:nt, None]
    z = view.options
    if deriv:
        try:
            out = h.dy(t, grid, y, z)
        except MissingDerivativeError:
            raise
        shape = (nt, view.S, grid.n_nodes, problem.n_state)
    else:
        out = h.value(t, grid, y, z)
        shape = (nt, view.S, grid.n_nodes)
    return np.broadcast_to(out, shape)


# trajectories -----------------------------------------------------------------------------

@dataclass(frozen=True)
class _Trajectory:
    grid: Grid
    values: np.ndarray  # (nt + 1, N, n)

    kind = "trajectory"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps({"kind": self.kind, "grid": self.grid.to_dict()}, sort_keys=True) + "\n")
        nt1, N, n = self.values.shape
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t"] + [f"y{c}_{i}" for c in range(n) for i in range(N)])
        times = np.linspace(0.0, self.grid.T, nt1)
        for k in range(nt1):
            row = self.values[k].T.ravel()
            w.writerow([k, repr(float(times[k]))] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        vals = np.where(np.isfinite(self.values), self.values, np.nan)
        return {"kind": self.kind, "grid": self.grid.to_dict(),
                "values": [[[None if math.isnan(v) else float(v) for v in node] for node in step]
                           for step in vals]}

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


@dataclass(frozen=True)
class StateTrajectory(_Trajectory):
    diverged_at: int | None = None

    kind = "state_trajectory"

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["diverged_at"] = self.diverged_at
        return d


@dataclass(frozen=True)
class AdjointTrajectory(_Trajectory):
    kind = "adjoint_trajectory"


# forward solver ------------------------------------------------------------------------------

def _affine_in_y(problem) -> bool:
    return all(f.y_degree() <= 1 for f in problem.reaction)


def solve_forward(problem: ParabolicProblem, control: Control) -> StateTrajectory:
    """IMEX time stepping; non-finite states are reported through ``diverged_at``."""
    grid = problem.grid
    view = _ControlView(problem, control)
    ops = _operators(problem)
    y0 = problem.y0
    nt, N, n = grid.nt, grid.n_nodes, problem.n_state
    dt = grid.dt

    if grid.dim == 1 and n == 1 and _affine_in_y(problem):
        f = problem.reaction[0]
        zero = np.zeros((nt + 1, N, 1))
        source = view.average(_eval_all(f, problem, zero, view))
        if f.depends_on_y:
            coef = view.average(_eval_all(f, problem, zero, view, deriv=True)[..., 0])
        else:
            coef = np.zeros((nt, N))
        traj, div = ops[0].sweep(y0[:, 0], coef, source, dt)
        values = traj[:, :, None]
        return StateTrajectory(grid, values, None if div < 0 else int(div))

    values = np.full((nt + 1, N, n), np.nan)
    values[0] = y0
    times = grid.times
    diverged = None
    for k in range(nt):
        y = values[k]
        vals = np.stack([f.value(times[k], grid, y, view.options) for f in problem.reaction], axis=-1)
        rhs = y + dt * view.average(vals, k)
        nxt = np.empty((N, n))
        for c in range(n):
            nxt[:, c] = ops[c].solve(rhs[:, c])
        if not np.all(np.isfinite(nxt)):
            diverged = k + 1
            break
        values[k + 1] = nxt
    return StateTrajectory(grid, values, diverged)


# cost and sensitivities -------------------------------------------------------------------------

@dataclass
class Sensitivities:
    """Per-step quantities shared by the cost, the adjoint and the Hamiltonian.

    ``step_cost``   (nt,)           running cost integral at step k
    ``phi_options`` (nt, S)         fine: cost term per atom (quadrature included)
                    (nt, N, S)      coarse: pointwise cost density per support point
    ``phi_y``       (nt, N, n)      density of d(step cost)/dy_k, divided by the weights
    ``f_options``   (nt, S, N, n)   reaction term per option
    ``f_y``         (nt, N, n, n)   averaged Jacobian, f_y[k, x, i, c] = d fbar_i / d y_c
    """

    step_cost: np.ndarray
    phi_options: np.ndarray
    phi_y: np.ndarray | None
    f_options: np.ndarray
    f_y: np.ndarray | None


def _check_mode(problem, view):
    if problem.composite and problem.running.mode == "atomwise" and view.coarse:
        raise ValueError("atomwise composite costs are only defined for fine relaxed controls")


def sensitivities(problem: ParabolicProblem, y: StateTrajectory, control: Control,
                  derivatives: bool = True) -> Sensitivities:
    grid = problem.grid
    view = _ControlView(problem, control)
    _check_mode(problem, view)
    Y = y.values
    W = np.asarray(grid.weights)
    nt, N, n = grid.nt, grid.n_nodes, problem.n_state

    F = np.stack([_eval_all(f, problem, Y, view) for f in problem.reaction], axis=-1)
    Fy = None
    if derivatives:
        jac = [view.average(_eval_all(f, problem, Y, view, deriv=True)) for f in problem.reaction]
        Fy = np.stack(jac, axis=2)  # (nt, N, n_i, n_c)

    run = problem.running
    phi_y = np.zeros((nt, N, n)) if derivatives else None
    if isinstance(run, LocalCost):
        dens = _eval_all(run.density, problem, Y, view)
        step_cost = view.average(dens) @ W
        phi_opt = np.transpose(dens, (0, 2, 1)) if view.coarse else dens @ W
        if derivatives and run.density.depends_on_y:
            phi_y = view.average(_eval_all(run.density, problem, Y, view, deriv=True))
    elif run.mode == "averaged":
        step_cost = np.zeros(nt)
        phi_opt = np.zeros((nt, N, view.S) if view.coarse else (nt, view.S))
        for prod in run.terms:
            raw = [_eval_all(h, problem, Y, view) for _, h in prod]
            vbar = [view.average(v) @ W for v in raw]
            fv = [fac(v) for (fac, _), v in zip(prod, vbar)]
            step_cost = step_cost + np.prod(fv, axis=0)
            for j, ((fac, h), v) in enumerate(zip(prod, raw)):
                others = np.prod([fv[i] for i in range(len(prod)) if i != j], axis=0) if len(prod) > 1 else 1.0
                coeff = others * fac.derivative(vbar[j])  # (nt,)
                if view.coarse:
                    phi_opt = phi_opt + coeff[:, None, None] * np.transpose(v, (0, 2, 1))
                else:
                    phi_opt = phi_opt + coeff[:, None] * (v @ W)
                if derivatives and h.depends_on_y:
                    phi_y = phi_y + coeff[:, None, None] * view.average(_eval_all(h, problem, Y, view, deriv=True))
    else:
        per_atom = np.zeros((nt, view.S))
        for prod in run.terms:
            vals = [_eval_all(h, problem, Y, view) @ W for _, h in prod]  # (nt, S)
            fv = [fac(v) for (fac, _), v in zip(prod, vals)]
            per_atom = per_atom + np.prod(fv, axis=0)
            if derivatives:
                for j, (fac, h) in enumerate(prod):
                    if not h.depends_on_y:
                        continue
                    others = np.prod([fv[i] for i in range(len(prod)) if i != j], axis=0) if len(prod) > 1 else 1.0
                    coeff = others * fac.derivative(vals[j])  # (nt, S)
                    hy = _eval_all(h, problem, Y, view, deriv=True)
                    phi_y = phi_y + view.average(coeff[:, :, None, None] * hy)
        step_cost = np.einsum("ks,ks->k", view.weights, per_atom)
        phi_opt = per_atom
    return Sensitivities(np.asarray(step_cost, dtype=float), np.asarray(phi_opt, dtype=float), phi_y, F, Fy)


def terminal_value(problem: ParabolicProblem, yT) -> float:
    if problem.terminal is None:
        return 0.0
    return float(problem.terminal.value(problem.grid.T, problem.grid, yT, None) @ problem.grid.weights)


def evaluate_cost(problem: ParabolicProblem, y: StateTrajectory, control: Control) -> float:
    """Rectangle-rule running cost plus terminal cost; ``inf`` for a diverged state."""
    if y.diverged:
        return math.inf
    sens = sensitivities(problem, y, control, derivatives=False)
    J = problem.grid.dt * float(np.sum(sens.step_cost)) + terminal_value(problem, y.values[-1])
    return J if math.isfinite(J) else math.inf


def cost(problem: ParabolicProblem, control: Control) -> float:
    """Forward solve followed by ``evaluate_cost``."""
    return evaluate_cost(problem, solve_forward(problem, control), control)


# adjoint ---------------------------------------------------------------------------------------------

def terminal_adjoint(problem: ParabolicProblem, yT) -> np.ndarray:
    if problem.terminal is None or not problem.terminal.depends_on_y:
        return np.zeros((problem.grid.n_nodes, problem.n_state))
    return -np.asarray(problem.terminal.dy(problem.grid.T, problem.grid, yT, None), dtype=float)


def solve_adjoint(problem: ParabolicProblem, y: StateTrajectory, control: Control,
                  sens: Sensitivities | None = None) -> AdjointTrajectory:
    """Exact transpose of the IMEX scheme, run backward from ``chi[nt] = -phi_T'(y[nt])``."""
    if y.diverged:
        raise ValueError(f"state diverged at step {y.diverged_at}; no adjoint")
    grid = problem.grid
    if sens is None or sens.phi_y is None:
        sens = sensitivities(problem, y, control, derivatives=True)
    ops = _operators(problem)
    nt, N, n = grid.nt, grid.n_nodes, problem.n_state
    dt = grid.dt
    chiT = terminal_adjoint(problem, y.values[-1])

    if grid.dim == 1 and n == 1:
        coef = np.zeros((nt, N))
        source = np.zeros((nt, N))
        # backward step j produces chi[nt-1-j] using the data of step nt-j
        coef[1:] = sens.f_y[nt - 1:0:-1, :, 0, 0]
        source[1:] = -sens.phi_y[nt - 1:0:-1, :, 0]
        traj, _ = ops[0].sweep(chiT[:, 0], coef, source, dt, adjoint=True)
        return AdjointTrajectory(grid, traj[::-1, :, None].copy())

    chi = np.zeros((nt + 1, N, n))
    chi[nt] = chiT
    for k in range(nt - 1, -1, -1):
        nxt = chi[k + 1]
        if k + 1 < nt:
            rhs = nxt + dt * (np.einsum("xic,xi->xc", sens.f_y[k + 1], nxt) - sens.phi_y[k + 1])
        else:
            rhs = nxt
        for c in range(n):
            chi[k, :, c] = ops[c].solve(rhs[:, c], adjoint=True)
    return AdjointTrajectory(grid, chi)


def reduced_gradient(problem: ParabolicProblem, y: StateTrajectory, chi: AdjointTrajectory,
                     control: Control, sens: Sensitivities | None = None) -> np.ndarray:
    """dJ/d(weights): (nt, S) for fine controls, (nt, N, S) for coarse ones."""
    if sens is None:
        sens = sensitivities(problem, y, control)
    grid = problem.grid
    W = np.asarray(grid.weights)
    chik = chi.values[:grid.nt]
    if isinstance(control, SpaceTimeYoungMeasure):
        fterm = np.einsum("ksxc,kxc->kxs", sens.f_options, chik)
        return -grid.dt * W[None, :, None] * (fterm - sens.phi_options)
    fterm = np.einsum("ksxc,kxc,x->ks", sens.f_options, chik, W)
    return -grid.dt * (fterm - sens.phi_options)
