"""Grids, control sets, nodal control fields and atom dictionaries.

Nodal ordering is x-fastest: in 2D the interior node (i, j), with i along the
first axis, has flat index ``j * (nx[0] - 1) + i``.

Quadrature uses lumped nodal weights: each interior node carries the volume of
its dual cell ``[x - dx/2, x + dx/2]`` per axis, and the half cells touching the
Dirichlet boundary are absorbed into the adjacent interior node. The weights sum
to the measure of the domain exactly, and the rule is second order for smooth
integrands.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, FeasibilityError, GridError


@dataclass(frozen=True)
class Grid:
    dim: int
    nx: tuple[int, ...]
    extents: tuple[float, ...]
    nt: int
    T: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"spatial dimension must be 1 or 2, got {self.dim}")
        if len(self.nx) != self.dim or len(self.extents) != self.dim:
            raise GridError("nx and extents need one entry per axis")
        if any(int(n) < 2 for n in self.nx):
            raise GridError(f"need at least 2 cells per axis, got nx={self.nx}")
        if int(self.nt) < 1:
            raise GridError(f"need at least one time step, got nt={self.nt}")
        if not all(e > 0 and math.isfinite(e) for e in self.extents):
            raise GridError(f"extents must be positive, got {self.extents}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise GridError(f"horizon T must be positive, got {self.T}")

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple(e / n for e, n in zip(self.extents, self.nx))

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(n - 1 for n in self.nx)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def axis_nodes(self, axis: int) -> np.ndarray:
        return np.arange(1, self.nx[axis]) * self.dx[axis]

    @cached_property
    def coords(self) -> np.ndarray:
        """Interior node coordinates, shape (n_nodes, dim), x-fastest."""
        axes = [self.axis_nodes(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes[::-1], indexing="ij")
        pts = np.stack([m.ravel() for m in mesh[::-1]], axis=-1)
        pts.setflags(write=False)
        return pts

    def axis_weights(self, axis: int) -> np.ndarray:
        w = np.full(self.nx[axis] - 1, self.dx[axis])
        w[0] += 0.5 * self.dx[axis]
        w[-1] += 0.5 * self.dx[axis]
        return w

    @cached_property
    def weights(self) -> np.ndarray:
        """Lumped quadrature weights per interior node (sum = |Omega|)."""
        w = self.axis_weights(0)
        if self.dim == 2:
            w = np.outer(self.axis_weights(1), w).ravel()
        w = np.ascontiguousarray(w)
        w.setflags(write=False)
        return w

    def dual_cells(self, axis: int) -> np.ndarray:
        """Dual-cell intervals per interior node along ``axis``, shape (nx-1, 2)."""
        x = self.axis_nodes(axis)
        h = self.dx[axis]
        lo = x - 0.5 * h
        hi = x + 0.5 * h
        lo[0] = 0.0
        hi[-1] = self.extents[axis]
        return np.stack([lo, hi], axis=-1)

    @property
    def times(self) -> np.ndarray:
        """Left endpoints t_k of the control steps, k = 0..nt-1."""
        return np.arange(self.nt) * self.dt

    def same_space(self, other: "Grid") -> bool:
        return (self.dim, self.nx, self.extents) == (other.dim, other.nx, other.extents)

    def refine(self, time: int = 1, space: int = 1) -> "Grid":
        return Grid(self.dim, tuple(n * space for n in self.nx), self.extents, self.nt * time, self.T)

    def with_nt(self, nt: int) -> "Grid":
        return Grid(self.dim, self.nx, self.extents, nt, self.T)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "nx": list(self.nx), "extents": list(self.extents), "nt": self.nt, "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["dim"]), tuple(int(v) for v in d["nx"]), tuple(float(v) for v in d["extents"]),
                   int(d["nt"]), float(d["T"]))


def make_grid(dim: int = 1, nx: int | Sequence[int] = 16, extent: float | Sequence[float] = 1.0,
              nt: int = 20, T: float = 1.0) -> Grid:
    """Build a uniform grid on the box (0, extent_1) x ... with nt time steps on [0, T]."""
    if isinstance(nx, (int, np.integer)):
        nx = (int(nx),) * dim
    if isinstance(extent, (int, float, np.floating, np.integer)):
        extent = (float(extent),) * dim
    return Grid(int(dim), tuple(int(n) for n in nx), tuple(float(e) for e in extent), int(nt), float(T))


@dataclass(frozen=True)
class Box:
    """Componentwise interval constraints ``lo_i <= z_i <= hi_i``."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.bounds:
            raise FeasibilityError("Box needs at least one component")
        for lo, hi in self.bounds:
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise FeasibilityError(f"invalid interval [{lo}, {hi}]")

    @property
    def m(self) -> int:
        return len(self.bounds)

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    def contains(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float).reshape(-1, self.m)
        return np.all((v >= self.lo) & (v <= self.hi), axis=-1)

    def project(self, point) -> np.ndarray:
        return np.minimum(np.maximum(np.asarray(point, dtype=float), self.lo), self.hi)

    def extreme_points(self) -> np.ndarray:
        corners = itertools.product(*[sorted({lo, hi}) for lo, hi in self.bounds])
        return np.array(list(corners), dtype=float).reshape(-1, self.m)

    def lattice(self, count: int) -> np.ndarray:
        """``count`` points of a tensor lattice over the box, vertices first when they fit.

        For m = 1 this is ``linspace(lo, hi, count)`` (midpoint for count = 1).
        """
        if count < 1:
            raise ValueError("count must be >= 1")
        if self.m == 1:
            lo, hi = self.bounds[0]
            pts = np.array([0.5 * (lo + hi)]) if count == 1 else np.linspace(lo, hi, count)
            return pts.reshape(-1, 1)
        q = max(2, math.ceil(count ** (1.0 / self.m) - 1e-12))
        axes = [np.linspace(lo, hi, q) for lo, hi in self.bounds]
        full = np.array(list(itertools.product(*axes)))
        if len(full) == count:
            return full
        pick = np.unique(np.round(np.linspace(0, len(full) - 1, count)).astype(int))
        return full[pick]

    def to_dict(self) -> dict:
        return {"type": "box", "bounds": [list(b) for b in self.bounds]}


@dataclass(frozen=True)
class FinitePoints:
    """A finite control set given by its points (order matters for tie-breaks)."""

    points: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.points:
            raise FeasibilityError("FinitePoints needs at least one point")
        m = len(self.points[0])
        if any(len(p) != m for p in self.points):
            raise FeasibilityError("all points need the same dimension")
        if len(set(self.points)) != len(self.points):
            raise FeasibilityError("duplicate points in FinitePoints")

    @property
    def m(self) -> int:
        return len(self.points[0])

    @property
    def array(self) -> np.ndarray:
        return np.array(self.points, dtype=float)

    def contains(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float).reshape(-1, self.m)
        return np.any(np.all(v[:, None, :] == self.array[None, :, :], axis=-1), axis=-1)

    def project(self, point) -> np.ndarray:
        p = np.asarray(point, dtype=float).reshape(self.m)
        d2 = np.sum((self.array - p) ** 2, axis=-1)
        return self.array[int(np.argmin(d2))].copy()

    def extreme_points(self) -> np.ndarray:
        return self.array

    def lattice(self, count: int) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        if count > len(self.points):
            raise ValueError(f"only {len(self.points)} distinct constants available, asked for {count}")
        return self.array[:count]

    def to_dict(self) -> dict:
        return {"type": "points", "points": [list(p) for p in self.points]}


ControlSet = Union[Box, FinitePoints]


def control_set_from_dict(d: dict) -> ControlSet:
    if d["type"] == "box":
        return Box(tuple((float(lo), float(hi)) for lo, hi in d["bounds"]))
    if d["type"] == "points":
        return FinitePoints(tuple(tuple(float(v) for v in p) for p in d["points"]))
    raise ValueError(f"unknown control set type {d['type']!r}")


def project_to_B(point, B: ControlSet) -> np.ndarray:
    """Nearest point of B in the Euclidean norm (lowest index wins ties)."""
    return B.project(point)


@dataclass(frozen=True, eq=False)
class ControlField:
    """Nodal control values, shape (n_nodes, m), on the interior nodes of ``grid``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_nodes:
            raise DimensionError(f"field has {v.shape[0]} nodes, grid has {self.grid.n_nodes}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def check(self, B: ControlSet) -> None:
        if self.m != B.m:
            raise DimensionError(f"field has m={self.m}, control set has m={B.m}")
        ok = B.contains(self.values)
        if not np.all(ok):
            bad = int(np.argmin(ok))
            raise FeasibilityError(f"node {bad} value {self.values[bad].tolist()} not in B")

    @classmethod
    def constant(cls, grid: Grid, value) -> "ControlField":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (grid.n_nodes, value.size)))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ControlField":
        return cls(grid, np.asarray(fn(grid.coords), dtype=float).reshape(grid.n_nodes, -1))

    def __eq__(self, other):
        return (isinstance(other, ControlField) and self.grid.same_space(other.grid)
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ControlDictionary:
    """Ordered finite family of B-feasible control fields; indices are identities."""

    grid: Grid
    control_set: ControlSet
    atoms: tuple[ControlField, ...]
    _values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if not atoms:
            raise ValueError("dictionary must contain at least one atom")
        for a in atoms:
            if not a.grid.same_space(self.grid):
                raise DimensionError("all atoms must live on the dictionary's spatial grid")
            a.check(self.control_set)
        vals = np.stack([a.values for a in atoms])
        vals.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "_values", vals)

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def values(self) -> np.ndarray:
        """Stacked atom values, shape (L, n_nodes, m)."""
        return self._values

    @property
    def m(self) -> int:
        return self._values.shape[2]

    def to_json_atoms(self) -> list:
        return self._values.tolist()

    def to_dict(self) -> dict:
        return {"control_set": self.control_set.to_dict(), "atoms": self.to_json_atoms()}

    def on_grid(self, grid: Grid) -> "ControlDictionary":
        """Same atoms attached to a grid with the same space but another time axis."""
        if not grid.same_space(self.grid):
            raise DimensionError("on_grid needs an identical spatial grid")
        return ControlDictionary(grid, self.control_set, tuple(ControlField(grid, a.values) for a in self.atoms))

    @classmethod
    def from_dict(cls, grid: Grid, d: dict) -> "ControlDictionary":
        B = control_set_from_dict(d["control_set"])
        return cls(grid, B, tuple(ControlField(grid, np.asarray(a, dtype=float)) for a in d["atoms"]))


def _parse_atoms(raw, grid: Grid, m: int) -> np.ndarray:
    if not isinstance(raw, list) or not raw:
        raise ValueError("custom atoms file must hold a non-empty JSON array of atoms")
    out = []
    for i, atom in enumerate(raw):
        if not isinstance(atom, list) or len(atom) != grid.n_nodes:
            raise ValueError(f"atom {i}: expected an array of {grid.n_nodes} nodal values")
        try:
            arr = np.asarray(atom, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"atom {i}: non-numeric entries") from exc
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] != m:
            raise ValueError(f"atom {i}: expected {m} component(s) per node")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"atom {i}: non-finite values")
        out.append(arr)
    return np.stack(out)


def load_atoms(path, grid: Grid, B: ControlSet, repair: bool = False) -> ControlDictionary:
    """Read a custom atoms file (atom-major, node-minor, component-innermost).

    With ``repair=True`` infeasible nodal values are projected onto B instead of
    rejected.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed atoms file {path}: {exc}") from exc
    vals = _parse_atoms(raw, grid, B.m)
    if repair:
        vals = np.array([[B.project(v) for v in atom] for atom in vals])
    return ControlDictionary(grid, B, tuple(ControlField(grid, a) for a in vals))


def save_atoms(path, dictionary: ControlDictionary) -> None:
    Path(path).write_text(json.dumps(dictionary.to_json_atoms()))


def build_dictionary(grid: Grid, B: ControlSet, strategy: str = "constants", count: int = 3,
                     seed: int = 0, path=None) -> ControlDictionary:
    """Deterministic atom dictionary.

    ``constants``: spatially constant fields at ``B.lattice(count)``.
    ``bang``: two-valued random sign patterns between extreme points of B; atom
    ``l`` draws from the ``l``-th child of ``SeedSequence(seed)`` (PCG64), so the
    family is reproducible and each atom independent of ``count``.
    ``custom``: atoms read from ``path``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if strategy == "constants":
        pts = B.lattice(count)
        atoms = tuple(ControlField.constant(grid, p) for p in pts)
    elif strategy == "bang":
        ext = B.extreme_points()
        children = np.random.SeedSequence(seed).spawn(count)
        atoms = []
        for child in children:
            rng = np.random.Generator(np.random.PCG64(child))
            if len(ext) > 1:
                i, j = rng.choice(len(ext), size=2, replace=False)
            else:
                i = j = 0
            pattern = rng.integers(0, 2, size=grid.n_nodes).astype(bool)
            vals = np.where(pattern[:, None], ext[i][None, :], ext[j][None, :])
            atoms.append(ControlField(grid, vals))
        atoms = tuple(atoms)
    elif strategy == "custom":
        if path is None:
            raise ValueError("custom strategy needs a path")
        d = load_atoms(path, grid, B)
        if len(d) < count:
            raise ValueError(f"custom file holds {len(d)} atoms, asked for {count}")
        atoms = d.atoms[:count]
    else:
        raise ValueError(f"unknown dictionary strategy {strategy!r}")
    return ControlDictionary(grid, B, atoms)
