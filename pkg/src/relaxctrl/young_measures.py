"""Discrete measure algebra for the two relaxations.

Fine relaxation: ``RelaxedControl`` holds, per time step, a probability vector
over the atoms of a ``ControlDictionary`` (a mix of controls). Coarse
relaxation: ``SpaceTimeYoungMeasure`` holds, per time step and interior node,
a probability vector over a finite support in B.

All spatial integrals use the grid's lumped nodal weights, so algebraic
identities between the two pictures (barycenters, Psi-evaluations) hold to
rounding error rather than only in the limit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .control_space import (
    ControlDictionary,
    ControlField,
    ControlSet,
    Grid,
    control_set_from_dict,
)
from .errors import DimensionError
from .integrands import Factor, Integrand, subdomain_fraction

SIMPLEX_TOL = 1e-12


def _to_simplex(weights, tol: float = SIMPLEX_TOL, normalize: bool = False) -> np.ndarray:
    w = np.array(weights, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if np.any(w < -tol):
        raise ValueError(f"negative weight {w.min():.3e} below tolerance")
    w = np.where(w < 0.0, 0.0, w)
    s = w.sum(axis=-1, keepdims=True)
    if not normalize and np.any(np.abs(s - 1.0) > tol):
        worst = float(np.max(np.abs(s - 1.0)))
        raise ValueError(f"rows do not sum to 1 (max drift {worst:.3e}); pass normalize=True to rescale")
    if np.any(s <= 0.0):
        raise ValueError("a weight row has zero mass")
    w = w / s
    w.setflags(write=False)
    return w


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Per-time-step probability weights over dictionary atoms, shape (nt, L)."""

    grid: Grid
    dictionary: ControlDictionary
    weights: np.ndarray

    def __init__(self, grid: Grid, dictionary: ControlDictionary, weights, normalize: bool = False):
        w = np.asarray(weights, dtype=float)
        if w.ndim == 1:
            w = w[None, :]
        if w.shape != (grid.nt, len(dictionary)):
            raise DimensionError(f"weights shape {w.shape}, expected {(grid.nt, len(dictionary))}")
        if not grid.same_space(dictionary.grid):
            raise DimensionError("dictionary lives on a different spatial grid")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "dictionary", dictionary)
        object.__setattr__(self, "weights", _to_simplex(w, normalize=normalize))

    @classmethod
    def uniform(cls, grid: Grid, dictionary: ControlDictionary) -> "RelaxedControl":
        L = len(dictionary)
        return cls(grid, dictionary, np.full((grid.nt, L), 1.0 / L), normalize=True)

    @classmethod
    def dirac(cls, grid: Grid, dictionary: ControlDictionary, index) -> "RelaxedControl":
        idx = np.broadcast_to(np.asarray(index, dtype=int), (grid.nt,))
        w = np.zeros((grid.nt, len(dictionary)))
        w[np.arange(grid.nt), idx] = 1.0
        return cls(grid, dictionary, w)

    @property
    def option_values(self) -> np.ndarray:
        """Atom values, shape (L, N, m)."""
        return self.dictionary.values

    def is_dirac(self) -> bool:
        return bool(np.all(np.max(self.weights, axis=1) == 1.0))

    def to_dict(self) -> dict:
        return {
            "kind": "relaxed_control",
            "grid": self.grid.to_dict(),
            "dictionary": self.dictionary.to_dict(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RelaxedControl":
        if d.get("kind") != "relaxed_control":
            raise ValueError("not a relaxed_control document")
        grid = Grid.from_dict(d["grid"])
        dictionary = ControlDictionary.from_dict(grid, d["dictionary"])
        return cls(grid, dictionary, np.asarray(d["weights"], dtype=float))


@dataclass(frozen=True, eq=False)
class YoungSlice:
    """A Young measure on Omega: per-node probability weights over ``support`` (N, Z)."""

    grid: Grid
    support: np.ndarray
    weights: np.ndarray

    def __init__(self, grid: Grid, support, weights, normalize: bool = False):
        sup = np.array(support, dtype=float)
        if sup.ndim == 1:
            sup = sup[:, None]
        w = np.asarray(weights, dtype=float)
        if w.shape != (grid.n_nodes, sup.shape[0]):
            raise DimensionError(f"slice weights shape {w.shape}, expected {(grid.n_nodes, sup.shape[0])}")
        sup.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "weights", _to_simplex(w, normalize=normalize))

    @classmethod
    def dirac_field(cls, u: ControlField) -> "YoungSlice":
        support, inv = np.unique(u.values, axis=0, return_inverse=True)
        w = np.zeros((u.grid.n_nodes, len(support)))
        w[np.arange(u.grid.n_nodes), inv.ravel()] = 1.0
        return cls(u.grid, support, w)

    @property
    def option_values(self) -> np.ndarray:
        """Support points broadcast to nodes, shape (Z, N, m)."""
        return np.broadcast_to(self.support[:, None, :], (len(self.support), self.grid.n_nodes, self.support.shape[1]))

    def node_measures(self) -> list[dict[tuple, float]]:
        """Per node {support point: weight} with zero weights dropped."""
        out = []
        for x in range(self.grid.n_nodes):
            out.append({tuple(self.support[z]): float(self.weights[x, z])
                        for z in range(len(self.support)) if self.weights[x, z] != 0.0})
        return out


@dataclass(frozen=True, eq=False)
class SpaceTimeYoungMeasure:
    """Per (time step, node) probability weights over a finite support, shape (nt, N, Z)."""

    grid: Grid
    control_set: ControlSet
    support: np.ndarray
    weights: np.ndarray

    def __init__(self, grid: Grid, control_set: ControlSet, support, weights, normalize: bool = False):
        sup = np.array(support, dtype=float)
        if sup.ndim == 1:
            sup = sup[:, None]
        if sup.shape[1] != control_set.m:
            raise DimensionError("support dimension does not match the control set")
        if not np.all(control_set.contains(sup)):
            raise ValueError("support points must lie in B")
        w = np.asarray(weights, dtype=float)
        if w.shape != (grid.nt, grid.n_nodes, sup.shape[0]):
            raise DimensionError(f"weights shape {w.shape}, expected {(grid.nt, grid.n_nodes, sup.shape[0])}")
        sup.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "control_set", control_set)
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "weights", _to_simplex(w, normalize=normalize))

    @classmethod
    def uniform(cls, grid: Grid, control_set: ControlSet, support) -> "SpaceTimeYoungMeasure":
        sup = np.atleast_2d(np.asarray(support, dtype=float).reshape(len(support), -1))
        Z = sup.shape[0]
        return cls(grid, control_set, sup, np.full((grid.nt, grid.n_nodes, Z), 1.0 / Z), normalize=True)

    @classmethod
    def constant_in_time(cls, s: YoungSlice, grid: Grid, control_set: ControlSet) -> "SpaceTimeYoungMeasure":
        w = np.broadcast_to(s.weights, (grid.nt,) + s.weights.shape)
        return cls(grid, control_set, s.support, w)

    @property
    def option_values(self) -> np.ndarray:
        """Support points broadcast to nodes, shape (Z, N, m)."""
        return np.broadcast_to(self.support[:, None, :], (len(self.support), self.grid.n_nodes, self.support.shape[1]))

    def slice(self, k: int) -> YoungSlice:
        return YoungSlice(self.grid, self.support, self.weights[k])

    def to_dict(self) -> dict:
        return {
            "kind": "spacetime_young_measure",
            "grid": self.grid.to_dict(),
            "control_set": self.control_set.to_dict(),
            "support": self.support.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceTimeYoungMeasure":
        if d.get("kind") != "spacetime_young_measure":
            raise ValueError("not a spacetime_young_measure document")
        return cls(Grid.from_dict(d["grid"]), control_set_from_dict(d["control_set"]),
                   np.asarray(d["support"], dtype=float), np.asarray(d["weights"], dtype=float))


def dumps(measure) -> str:
    return json.dumps(measure.to_dict())


def loads(text: str):
    d = json.loads(text)
    if d.get("kind") == "relaxed_control":
        return RelaxedControl.from_dict(d)
    return SpaceTimeYoungMeasure.from_dict(d)


# evaluation -----------------------------------------------------------------------

def psi_values(h: Integrand, values: np.ndarray, grid: Grid, t: float = 0.0) -> np.ndarray:
    """[Psi h](u_l) for a stack of fields ``values`` (L, N, m); returns (L,)."""
    # row-wise reduction so each atom's value does not depend on the stack size
    return np.sum(h.value(t, grid, None, values) * grid.weights, axis=-1)


def psi_eval(h: Integrand, u: ControlField, t: float = 0.0) -> float:
    """Quadrature of the integral over Omega of h(t, x, u(x))."""
    return float(psi_values(h, u.values[None], u.grid, t)[0])


@dataclass(frozen=True)
class CompositeTestFunctional:
    """v = sum_i prod_j f_ij(Psi h_ij); ``terms[i]`` is a tuple of (Factor, Integrand) pairs."""

    terms: tuple[tuple[tuple[Factor, Integrand], ...], ...]

    def __post_init__(self):
        if not self.terms or any(not row for row in self.terms):
            raise ValueError("composite functional needs k, l >= 1")

    def on_fields(self, values: np.ndarray, grid: Grid, t: float = 0.0) -> np.ndarray:
        out = np.zeros(values.shape[0])
        for row in self.terms:
            prod = np.ones(values.shape[0])
            for f, h in row:
                prod = prod * f(psi_values(h, values, grid, t))
            out = out + prod
        return out

    def __call__(self, u: ControlField, t: float = 0.0) -> float:
        return float(self.on_fields(u.values[None], u.grid, t)[0])

    def on_young(self, nu: YoungSlice, t: float = 0.0) -> float:
        """Continuous extension to Young measures: factors applied to Young integrals."""
        total = 0.0
        for row in self.terms:
            prod = 1.0
            for f, h in row:
                prod *= float(f(young_eval(h, nu, t)))
            total += prod
        return total


def relaxed_eval(v, mu_row, dictionary: ControlDictionary, t: float = 0.0) -> float:
    """Sum over atoms of mu_l * v(u_l) for a Psi-integrand or a composite functional."""
    mu = np.asarray(mu_row, dtype=float).ravel()
    if mu.shape[0] != len(dictionary):
        raise DimensionError(f"measure has {mu.shape[0]} weights, dictionary has {len(dictionary)} atoms")
    if isinstance(v, CompositeTestFunctional):
        vals = v.on_fields(dictionary.values, dictionary.grid, t)
    else:
        vals = psi_values(v, dictionary.values, dictionary.grid, t)
    return float(mu @ vals)


def young_eval(h: Integrand, nu: YoungSlice, t: float = 0.0) -> float:
    """Quadrature of the integral over Omega of sum_z nu_x(z) h(t, x, z)."""
    vals = h.value(t, nu.grid, None, nu.option_values)
    per_node = np.einsum("xz,zx->x", nu.weights, vals)
    return float(per_node @ nu.grid.weights)


# Choquet representation of two-atomic measures --------------------------------------

def subdomain_mask(grid: Grid, lo: Sequence[float], hi: Sequence[float]) -> np.ndarray:
    """Boolean node mask of the box [lo, hi]; it must be a union of quadrature cells."""
    frac = subdomain_fraction(grid, lo, hi)
    if np.any((frac > 1e-12) & (frac < 1 - 1e-12)):
        raise ValueError("subdomain boundary cuts a quadrature cell; choose nx so it aligns")
    return frac > 0.5


def two_atomic_slice(u1: ControlField, u2: ControlField, mask: np.ndarray) -> YoungSlice:
    """nu_x = 1/2 d_u1 + 1/2 d_u2 on the mask and 1/4 d_u1 + 3/4 d_u2 elsewhere."""
    grid = u1.grid
    w1 = np.where(mask, 0.5, 0.25)
    w2 = 1.0 - w1
    stacked = np.concatenate([u1.values, u2.values], axis=0)
    support = np.unique(stacked, axis=0)
    w = np.zeros((grid.n_nodes, len(support)))
    for vals, wk in ((u1.values, w1), (u2.values, w2)):
        idx = _support_index(support, vals)
        np.add.at(w, (np.arange(grid.n_nodes), idx), wk)
    return YoungSlice(grid, support, w)


def _support_index(support: np.ndarray, vals: np.ndarray) -> np.ndarray:
    eq = np.all(vals[:, None, :] == support[None, :, :], axis=-1)
    return np.argmax(eq, axis=1)


def choquet_represent(u1: ControlField, u2: ControlField, mask: np.ndarray, a: float,
                      control_set: ControlSet) -> RelaxedControl:
    """Four-atomic measure over {u11, u12, u21, u22} with weights (a, 1/2-a, 1/4-a, 1/4+a).

    u11 = u1, u22 = u2, u12 = u1 on the mask and u2 elsewhere, u21 the swap of
    u12. Its barycenter is ``two_atomic_slice(u1, u2, mask)`` for every a in
    [0, 1/4]; zero-weight atoms are kept in place.
    """
    if not (0.0 <= a <= 0.25):
        raise ValueError(f"parameter a must lie in [0, 1/4], got {a}")
    grid = u1.grid
    m = np.asarray(mask, dtype=bool)[:, None]
    u12 = ControlField(grid, np.where(m, u1.values, u2.values))
    u21 = ControlField(grid, np.where(m, u2.values, u1.values))
    dictionary = ControlDictionary(grid, control_set, (u1, u12, u21, u2))
    w = np.array([a, 0.5 - a, 0.25 - a, 0.25 + a])
    return RelaxedControl(grid.with_nt(1), dictionary, w[None, :])


def barycenter(mu_row, dictionary: ControlDictionary) -> YoungSlice:
    """nu_x = sum_l mu_l delta_{u_l(x)}, merging atoms with identical nodal values."""
    mu = np.asarray(mu_row, dtype=float).ravel()
    if mu.shape[0] != len(dictionary):
        raise DimensionError("measure/dictionary length mismatch")
    vals = dictionary.values
    L, N, m = vals.shape
    support = np.unique(vals.reshape(L * N, m), axis=0)
    w = np.zeros((N, len(support)))
    nodes = np.arange(N)
    for l in range(L):
        idx = _support_index(support, vals[l])
        np.add.at(w, (nodes, idx), mu[l])
    return YoungSlice(dictionary.grid, support, w, normalize=True)


# chattering ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChatteredControl:
    """A classical control on the k-times time-refined grid: one atom index per sub-step."""

    grid: Grid
    dictionary: ControlDictionary
    indices: np.ndarray
    k: int

    def as_relaxed(self) -> RelaxedControl:
        return RelaxedControl.dirac(self.grid, self.dictionary.on_grid(self.grid), self.indices)


def chatter_time(mu: RelaxedControl, k: int) -> ChatteredControl:
    """Split each step into k sub-steps and spread atoms over them.

    Sub-step counts come from largest-remainder rounding of k * weights (ties to
    the lower atom index); within a step the atoms are interleaved by smooth
    weighted round-robin so each atom's sub-steps are evenly spaced.
    """
    if k < 1:
        raise ValueError("refinement k must be >= 1")
    nt = mu.grid.nt
    slots = np.full(nt, k, dtype=np.int64)
    counts = _kernels.apportion(np.ascontiguousarray(mu.weights), slots)
    seq = _kernels.interleave(counts, slots)
    fine = mu.grid.refine(time=k)
    return ChatteredControl(fine, mu.dictionary.on_grid(fine), seq, k)


def refine_relaxed(mu: RelaxedControl, k: int) -> RelaxedControl:
    """The same relaxed control on the k-times time-refined grid (rows repeated)."""
    fine = mu.grid.refine(time=k)
    return RelaxedControl(fine, mu.dictionary.on_grid(fine), np.repeat(mu.weights, k, axis=0))


def chatter_time_gap(h: Integrand, mu: RelaxedControl, k: int) -> float:
    """|<delta(u_k) - mu, h>| with both pairings taken on the refined time grid."""
    ch = chatter_time(mu, k)
    fine = ch.grid
    dt = fine.dt
    total = 0.0
    vals_cache = None
    for j, t in enumerate(fine.times):
        if vals_cache is None or h.time_dependent:
            vals_cache = psi_values(h, mu.dictionary.values, mu.grid, t)
        row = mu.weights[j // k]
        total += dt * (vals_cache[ch.indices[j]] - float(row @ vals_cache))
    return abs(total)


@dataclass(frozen=True, eq=False)
class SpaceTimeChattered:
    """A classical control field trajectory on a grid refined by k in space and time."""

    grid: Grid
    values: np.ndarray  # (nt * k, N_fine, m)
    k: int


def _fine_to_coarse(coarse: Grid, fine: Grid) -> np.ndarray:
    """Coarse node owning each fine node (dual-cell containment, lower index on ties)."""
    idx_axes = []
    for a in range(coarse.dim):
        cells = coarse.dual_cells(a)
        xf = fine.axis_nodes(a)
        ia = np.searchsorted(cells[:, 1], xf, side="left")
        idx_axes.append(np.clip(ia, 0, coarse.nx[a] - 2))
    if coarse.dim == 1:
        return idx_axes[0]
    ix, iy = np.meshgrid(idx_axes[0], idx_axes[1], indexing="xy")
    return (iy * (coarse.nx[0] - 1) + ix).ravel()


def chatter_spacetime(nu: SpaceTimeYoungMeasure, k: int) -> SpaceTimeChattered:
    """Realize cell weights by diagonal stripes of sub-cells in space-time.

    Each coarse (time step, node) cell owns k sub-steps times the fine nodes in
    its dual cell. Slot counts per support point use the same largest-remainder
    rule as ``chatter_time``; slots are visited along diagonals (time offset +
    node rank) and filled by smooth weighted round-robin.
    """
    if k < 1:
        raise ValueError("refinement k must be >= 1")
    coarse = nu.grid
    fine = coarse.refine(time=k, space=k)
    owner = _fine_to_coarse(coarse, fine)
    members = [np.flatnonzero(owner == x) for x in range(coarse.n_nodes)]
    nt, N, Z = nu.weights.shape
    sizes = np.array([len(mb) for mb in members], dtype=np.int64)
    slots = np.tile(sizes * k, nt).astype(np.int64)
    counts = _kernels.apportion(np.ascontiguousarray(nu.weights.reshape(nt * N, Z)), slots)
    seq = _kernels.interleave(counts, slots)
    orders = {}
    for c in set(sizes.tolist()):
        jj, rr = np.meshgrid(np.arange(k), np.arange(c), indexing="ij")
        jj, rr = jj.ravel(), rr.ravel()
        order = np.lexsort((jj, jj + rr))
        orders[c] = (jj[order], rr[order])
    m = nu.support.shape[1]
    values = np.empty((nt * k, fine.n_nodes, m))
    pos = 0
    for kt in range(nt):
        for x in range(N):
            c = sizes[x]
            jj, rr = orders[c]
            n_slots = c * k
            picks = seq[pos:pos + n_slots]
            pos += n_slots
            values[kt * k + jj, members[x][rr]] = nu.support[picks]
    return SpaceTimeChattered(fine, values, k)


def young_spacetime_integral(h: Integrand, nu: SpaceTimeYoungMeasure) -> float:
    """Left-rectangle time quadrature of young_eval over the steps of nu."""
    return float(sum(nu.grid.dt * young_eval(h, nu.slice(k), t) for k, t in enumerate(nu.grid.times)))


def chattered_spacetime_integral(h: Integrand, ch: SpaceTimeChattered, coarse_times: bool = True) -> float:
    """Quadrature of h(t, x, u(t, x)) over the fine space-time grid.

    With ``coarse_times`` each sub-step is evaluated at its coarse step's left
    endpoint, matching ``young_spacetime_integral`` for time-dependent h.
    """
    fine = ch.grid
    total = 0.0
    for j in range(fine.nt):
        t = (j // ch.k) * fine.dt * ch.k if coarse_times else j * fine.dt
        vals = h.value(t, fine, None, ch.values[j][None])[0]
        total += fine.dt * float(vals @ fine.weights)
    return total
