"""Closed-form integrand registry h(t, x, y, z) and scalar factor functions.

Integrands are evaluated on whole grids at once::

    h.value(t, grid, y, z)   # y: (N, n) or None, z: (..., N, m)  ->  (..., N)
    h.dy(t, grid, y, z)      #                                      ->  (..., N, n)

Available forms:

* ``Polynomial``: sum of monomials ``c * t^a * prod x_i^b_i * S(x)^s * prod y_j^c_j * prod z_k^d_k``
  where ``S(x) = prod_i sin(k*pi*x_i/L_i)``.
* ``AbsPower``: ``c * |z - center(x)|^p`` (Euclidean norm over components).
* ``Restricted``: an integrand multiplied by the indicator of a box subdomain,
  using the fraction of each node's dual cell inside the box.
* ``IntegrandSum``: sum of integrands.

``from_spec`` builds any of these from plain dicts (used by configs and presets).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .control_space import Grid
from .errors import MissingDerivativeError


class Integrand:
    """Base class; subclasses implement ``value`` and usually ``dy``."""

    time_dependent = False
    depends_on_y = False

    def value(self, t, grid: Grid, y, z) -> np.ndarray:
        raise NotImplementedError

    def dy(self, t, grid: Grid, y, z) -> np.ndarray:
        raise MissingDerivativeError(f"{type(self).__name__} has no y-derivative")

    def y_degree(self) -> int:
        """Polynomial degree in y (large sentinel when not polynomial)."""
        return 0 if not self.depends_on_y else 99

    def __add__(self, other: "Integrand") -> "IntegrandSum":
        return IntegrandSum((self, other))

    def check_finite(self, grid: Grid, sample_z: np.ndarray, n_state: int = 1) -> None:
        """Sample h on grid x sample points and raise if anything is non-finite."""
        y = np.zeros((grid.n_nodes, n_state)) if self.depends_on_y else None
        z = np.broadcast_to(sample_z[:, None, :], (len(sample_z), grid.n_nodes, sample_z.shape[1]))
        for t in (0.0, 0.5 * grid.T, grid.T):
            v = self.value(t, grid, y, z)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{self!r} is not finite on the sampled control set")


@dataclass(frozen=True)
class Term:
    coef: float
    t: int = 0
    x: tuple[int, ...] = ()
    y: tuple[int, ...] = ()
    z: tuple[int, ...] = ()
    sin: int = 0
    freq: int = 1

    def _space(self, grid: Grid) -> np.ndarray:
        out = np.ones(grid.n_nodes)
        for a, p in enumerate(self.x):
            if p:
                out = out * grid.coords[:, a] ** p
        if self.sin:
            s = np.ones(grid.n_nodes)
            for a in range(grid.dim):
                s = s * np.sin(self.freq * np.pi * grid.coords[:, a] / grid.extents[a])
            out = out * s ** self.sin
        return out

    @staticmethod
    def _powprod(arr, powers, skip=-1):
        out = None
        for c, p in enumerate(powers):
            if p and c != skip:
                v = arr[..., c] ** p
                out = v if out is None else out * v
        return out


def _term_from(d) -> Term:
    if isinstance(d, Term):
        return d
    return Term(coef=float(d.get("coef", 1.0)), t=int(d.get("t", 0)), x=tuple(d.get("x", ())),
                y=tuple(d.get("y", ())), z=tuple(d.get("z", ())), sin=int(d.get("sin", 0)),
                freq=int(d.get("freq", 1)))


def _out_shape(grid: Grid, y, z) -> tuple:
    shape = (grid.n_nodes,)
    if y is not None:
        shape = np.broadcast_shapes(shape, y.shape[:-1])
    if z is not None:
        shape = np.broadcast_shapes(shape, z.shape[:-1])
    return shape


class Polynomial(Integrand):
    def __init__(self, terms: Sequence[Term | dict]):
        self.terms = tuple(_term_from(t) for t in terms)
        self.time_dependent = any(t.t for t in self.terms)
        self.depends_on_y = any(any(t.y) for t in self.terms)
        self._space_cache: dict = {}

    def __repr__(self):
        return f"Polynomial({len(self.terms)} terms)"

    def y_degree(self) -> int:
        return max((sum(t.y) for t in self.terms), default=0)

    def _space(self, term: Term, grid: Grid) -> np.ndarray:
        key = (term, grid)
        hit = self._space_cache.get(key)
        if hit is None:
            hit = term._space(grid)
            self._space_cache[key] = hit
        return hit

    def _eval(self, t, grid, y, z, dy_comp=None):
        out = None
        for term in self.terms:
            if dy_comp is not None:
                p = term.y[dy_comp] if dy_comp < len(term.y) else 0
                if p == 0:
                    continue
            v = term.coef * (t ** term.t if term.t else 1.0) * self._space(term, grid)
            if any(term.y):
                if y is None:
                    raise ValueError("integrand depends on y but no state was given")
                if dy_comp is None:
                    yp = Term._powprod(y, term.y)
                else:
                    yp = Term._powprod(y, term.y, skip=dy_comp)
                    dyv = p * y[..., dy_comp] ** (p - 1)
                    yp = dyv if yp is None else yp * dyv
                v = v * yp
            if any(term.z):
                v = v * Term._powprod(z, term.z)
            out = v if out is None else out + v
        shape = _out_shape(grid, y, z)
        if out is None:
            return np.zeros(shape)
        return np.array(np.broadcast_to(out, np.broadcast_shapes(np.shape(out), shape)), dtype=float)

    def value(self, t, grid, y, z):
        return self._eval(t, grid, y, z)

    def dy(self, t, grid, y, z):
        n = y.shape[-1]
        comps = [self._eval(t, grid, y, z, dy_comp=c) for c in range(n)]
        return np.stack(comps, axis=-1)


class AbsPower(Integrand):
    """``coef * |z - center|^p``; ``center`` is a constant vector or nodal array (N, m)."""

    def __init__(self, p: float, center=0.0, coef: float = 1.0):
        self.p = float(p)
        self.center = np.asarray(center, dtype=float)
        self.coef = float(coef)

    def __repr__(self):
        return f"AbsPower(p={self.p})"

    def value(self, t, grid, y, z):
        c = self.center
        if c.ndim == 1 and c.shape[0] == grid.n_nodes and z.shape[-1] == 1:
            c = c[:, None]
        diff = z - c
        return self.coef * np.linalg.norm(diff, axis=-1) ** self.p

    def dy(self, t, grid, y, z):
        return np.zeros(_out_shape(grid, y, z) + (y.shape[-1],))


class Restricted(Integrand):
    """Integrand times the indicator of the box ``prod [lo_i, hi_i]``."""

    def __init__(self, inner: Integrand, lo: Sequence[float], hi: Sequence[float]):
        self.inner = inner
        self.lo = tuple(float(v) for v in lo)
        self.hi = tuple(float(v) for v in hi)
        self.time_dependent = inner.time_dependent
        self.depends_on_y = inner.depends_on_y

    def __repr__(self):
        return f"Restricted({self.inner!r}, {self.lo}, {self.hi})"

    def y_degree(self):
        return self.inner.y_degree()

    def fraction(self, grid: Grid) -> np.ndarray:
        return subdomain_fraction(grid, self.lo, self.hi)

    def value(self, t, grid, y, z):
        return self.fraction(grid) * self.inner.value(t, grid, y, z)

    def dy(self, t, grid, y, z):
        return self.fraction(grid)[:, None] * self.inner.dy(t, grid, y, z)


class IntegrandSum(Integrand):
    def __init__(self, parts: Sequence[Integrand]):
        flat = []
        for p in parts:
            flat.extend(p.parts if isinstance(p, IntegrandSum) else [p])
        self.parts = tuple(flat)
        self.time_dependent = any(p.time_dependent for p in self.parts)
        self.depends_on_y = any(p.depends_on_y for p in self.parts)

    def __repr__(self):
        return f"IntegrandSum({list(self.parts)!r})"

    def y_degree(self):
        return max(p.y_degree() for p in self.parts)

    def value(self, t, grid, y, z):
        out = self.parts[0].value(t, grid, y, z)
        for p in self.parts[1:]:
            out = out + p.value(t, grid, y, z)
        return out

    def dy(self, t, grid, y, z):
        out = None
        for p in self.parts:
            if not p.depends_on_y:
                continue
            v = p.dy(t, grid, y, z)
            out = v if out is None else out + v
        if out is None:
            return np.zeros(_out_shape(grid, y, z) + (y.shape[-1],))
        return out


class ScaledDerivative(Integrand):
    """Same values as ``inner`` but a y-derivative scaled by ``scale`` (test fixture)."""

    def __init__(self, inner: Integrand, scale: float):
        self.inner = inner
        self.scale = float(scale)
        self.time_dependent = inner.time_dependent
        self.depends_on_y = inner.depends_on_y

    def y_degree(self):
        return self.inner.y_degree()

    def value(self, t, grid, y, z):
        return self.inner.value(t, grid, y, z)

    def dy(self, t, grid, y, z):
        return self.scale * self.inner.dy(t, grid, y, z)


class WithoutDerivative(Integrand):
    """Hides the y-derivative of ``inner``."""

    def __init__(self, inner: Integrand):
        self.inner = inner
        self.time_dependent = inner.time_dependent
        self.depends_on_y = inner.depends_on_y

    def y_degree(self):
        return self.inner.y_degree()

    def value(self, t, grid, y, z):
        return self.inner.value(t, grid, y, z)


def subdomain_fraction(grid: Grid, lo: Sequence[float], hi: Sequence[float]) -> np.ndarray:
    """Fraction of each node's quadrature (dual) cell lying inside the box [lo, hi]."""
    frac = None
    for a in range(grid.dim):
        cells = grid.dual_cells(a)
        overlap = np.clip(np.minimum(cells[:, 1], hi[a]) - np.maximum(cells[:, 0], lo[a]), 0.0, None)
        fa = overlap / (cells[:, 1] - cells[:, 0])
        frac = fa if frac is None else np.outer(fa, frac).ravel()
    return frac


# scalar factor functions for composite functionals --------------------------------

@dataclass(frozen=True)
class Factor:
    """Scalar function f: R -> R from the registry {identity, square, exp_clip, affine}."""

    kind: str = "identity"
    a: float = 1.0
    b: float = 0.0
    lo: float = -30.0
    hi: float = 30.0

    def __post_init__(self):
        if self.kind not in ("identity", "square", "exp_clip", "affine"):
            raise ValueError(f"unknown factor {self.kind!r}")

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "identity":
            return v
        if self.kind == "square":
            return v * v
        if self.kind == "exp_clip":
            return np.exp(np.clip(v, self.lo, self.hi))
        return self.a * v + self.b

    def derivative(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "identity":
            return np.ones_like(v)
        if self.kind == "square":
            return 2.0 * v
        if self.kind == "exp_clip":
            inside = (v >= self.lo) & (v <= self.hi)
            return np.where(inside, np.exp(np.clip(v, self.lo, self.hi)), 0.0)
        return np.full_like(v, self.a)

    @property
    def affine(self) -> bool:
        return self.kind in ("identity", "affine")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "lo": self.lo, "hi": self.hi}


def from_spec(spec) -> Integrand:
    """Build an integrand from a plain dict.

    ``{"kind": "poly", "terms": [{"coef": 1, "z": [2]}, ...]}``,
    ``{"kind": "abs_power", "p": 2, "center": 0.0, "coef": 1}``,
    ``{"kind": "restricted", "inner": {...}, "lo": [0], "hi": [0.5]}``,
    ``{"kind": "sum", "parts": [...]}``.
    """
    if isinstance(spec, Integrand):
        return spec
    kind = spec.get("kind")
    if kind == "poly":
        return Polynomial(spec["terms"])
    if kind == "abs_power":
        return AbsPower(spec["p"], spec.get("center", 0.0), spec.get("coef", 1.0))
    if kind == "restricted":
        return Restricted(from_spec(spec["inner"]), spec["lo"], spec["hi"])
    if kind == "sum":
        return IntegrandSum([from_spec(p) for p in spec["parts"]])
    raise ValueError(f"unknown integrand kind {kind!r}")


def constant(c: float = 1.0) -> Polynomial:
    return Polynomial([Term(c)])


def zero() -> Polynomial:
    return Polynomial([])
