"""Physical parameters, polynomial fields, time grids and model validation.

Every polynomial in the package (potential, phase, log-amplitude, probes)
uses one value convention::

    p(x) = c0 + c1.x + 1/2 x.c2.x + 1/3! c3.x^3 + 1/4! c4.x^4

so stored coefficients are directly the series coefficients ``U0, U1k,
U2kl, s1k, s2kl, ...`` of the expansions, never pre-multiplied.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, ValidationError

MAX_DIMENSION = 3
MAX_ORDER = 4
SYMMETRY_TOL = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def symmetrize(t: np.ndarray) -> np.ndarray:
    """Average a tensor over all permutations of its axes."""
    t = np.asarray(t)
    if t.ndim < 2:
        return t.copy()
    perms = list(itertools.permutations(range(t.ndim)))
    return sum(np.transpose(t, p) for p in perms) / len(perms)


def asymmetry(t: np.ndarray) -> float:
    """Largest deviation of ``t`` from its fully symmetrized version."""
    t = np.asarray(t)
    if t.ndim < 2 or t.size == 0:
        return 0.0
    return float(np.max(np.abs(t - symmetrize(t))))


@dataclass(frozen=True)
class PhysicalParams:
    """Mass, ordinary Planck constant and spatial dimension.

    The modified constant of the functional representation is not stored
    here; it is derived from a time grid (see ``DiscretizationContext``).
    """

    mass: float = 1.0
    hbar: float = 1.0
    dimension: int = 1

    def with_hbar(self, hbar: float) -> "PhysicalParams":
        return PhysicalParams(self.mass, float(hbar), self.dimension)


@dataclass(frozen=True, eq=False)
class PolynomialField:
    """Real polynomial in x up to fourth order (see module docstring)."""

    c0: float
    c1: np.ndarray
    c2: np.ndarray
    c3: Optional[np.ndarray] = None
    c4: Optional[np.ndarray] = None

    def __post_init__(self):
        c1 = np.atleast_1d(np.asarray(self.c1, dtype=float))
        if c1.ndim != 1:
            raise InputError("c1 must be a vector")
        d = c1.shape[0]
        c2 = np.asarray(self.c2, dtype=float).reshape(d, d)
        object.__setattr__(self, "c0", float(self.c0))
        object.__setattr__(self, "c1", _frozen(c1))
        object.__setattr__(self, "c2", _frozen(c2))
        for name, order in (("c3", 3), ("c4", 4)):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float)
                if value.shape != (d,) * order:
                    raise InputError(f"{name} must have shape {(d,) * order}")
                object.__setattr__(self, name, _frozen(value))

    # construction helpers -------------------------------------------------
    @classmethod
    def zero(cls, dimension: int = 1) -> "PolynomialField":
        return cls(0.0, np.zeros(dimension), np.zeros((dimension, dimension)))

    @classmethod
    def from_series(cls, c0=0.0, c1=None, c2=None, c3=None, c4=None, dimension=None):
        """Build a field from scalars or arrays; missing low orders are zero."""
        if dimension is None:
            for value, order in ((c1, 1), (c2, 2), (c3, 3), (c4, 4)):
                if value is not None and np.ndim(value) > 0:
                    dimension = np.shape(value)[0]
                    break
            else:
                dimension = 1
        d = dimension
        c1 = np.zeros(d) if c1 is None else np.broadcast_to(np.asarray(c1, float), (d,))
        c2 = np.zeros((d, d)) if c2 is None else np.asarray(c2, float).reshape(d, d)
        if c3 is not None:
            c3 = np.asarray(c3, float).reshape((d,) * 3)
        if c4 is not None:
            c4 = np.asarray(c4, float).reshape((d,) * 4)
        return cls(c0, c1, c2, c3, c4)

    # structure ------------------------------------------------------------
    @property
    def dimension(self) -> int:
        return self.c1.shape[0]

    def degree(self) -> int:
        """Highest structurally present order (orders 0-2 are always stored)."""
        if self.c4 is not None:
            return 4
        if self.c3 is not None:
            return 3
        return 2

    def tensors(self):
        """Coefficient tensors ``[c0, c1, c2, c3, c4]`` with None for absent orders."""
        return [np.float64(self.c0), self.c1, self.c2, self.c3, self.c4]

    def max_asymmetry(self) -> float:
        return max(asymmetry(t) for t in (self.c2, self.c3, self.c4) if t is not None)

    def truncated(self, order: int) -> "PolynomialField":
        return PolynomialField(
            self.c0,
            self.c1,
            self.c2,
            self.c3 if order >= 3 else None,
            self.c4 if order >= 4 else None,
        )

    def is_zero(self) -> bool:
        return all(not np.any(t) for t in self.tensors() if t is not None)

    # linear structure -----------------------------------------------------
    def _combine(self, other: "PolynomialField", a: float, b: float) -> "PolynomialField":
        if other.dimension != self.dimension:
            raise InputError("dimension mismatch between polynomial fields")

        def mix(x, y):
            if x is None and y is None:
                return None
            x = 0.0 if x is None else x
            y = 0.0 if y is None else y
            return a * x + b * y

        return PolynomialField(
            a * self.c0 + b * other.c0,
            a * self.c1 + b * other.c1,
            a * self.c2 + b * other.c2,
            mix(self.c3, other.c3),
            mix(self.c4, other.c4),
        )

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def __mul__(self, a):
        a = float(a)
        return PolynomialField(
            a * self.c0,
            a * self.c1,
            a * self.c2,
            None if self.c3 is None else a * self.c3,
            None if self.c4 is None else a * self.c4,
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __eq__(self, other):
        if not isinstance(other, PolynomialField):
            return NotImplemented
        return all(
            (x is None and y is None)
            or (x is not None and y is not None and np.array_equal(x, y))
            for x, y in zip(self.tensors(), other.tensors())
        )

    def __hash__(self):
        return hash(tuple(None if t is None else np.asarray(t).tobytes() for t in self.tensors()))

    def __call__(self, x) -> float:
        return eval_poly_jet(self, x)[0]

    def to_dict(self) -> dict:
        out = {"c0": self.c0, "c1": self.c1.tolist(), "c2": self.c2.tolist()}
        if self.c3 is not None:
            out["c3"] = self.c3.tolist()
        if self.c4 is not None:
            out["c4"] = self.c4.tolist()
        return out


def eval_poly_jet(field: PolynomialField, x) -> tuple[float, np.ndarray, float]:
    """Value, gradient and Laplacian of ``field`` at ``x``.

    Parameters
    ----------
    field : PolynomialField
    x : array_like, shape (D,)

    Returns
    -------
    value : float
    gradient : ndarray, shape (D,)
    laplacian : float
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (field.dimension,):
        raise InputError(
            f"point has shape {x.shape}, expected ({field.dimension},)"
        )
    c2x = field.c2 @ x
    value = field.c0 + field.c1 @ x + 0.5 * (x @ c2x)
    grad = field.c1 + c2x
    lap = float(np.trace(field.c2))
    if field.c3 is not None:
        c3xx = np.einsum("ijk,j,k->i", field.c3, x, x)
        value += c3xx @ x / 6.0
        grad = grad + 0.5 * c3xx
        lap += float(np.einsum("iik,k->", field.c3, x))
    if field.c4 is not None:
        c4xxx = np.einsum("ijkl,j,k,l->i", field.c4, x, x, x)
        value += c4xxx @ x / 24.0
        grad = grad + c4xxx / 6.0
        lap += 0.5 * float(np.einsum("iikl,k,l->", field.c4, x, x))
    return float(value), np.asarray(grad, dtype=float), float(lap)


@dataclass(frozen=True)
class PotentialSchedule:
    """Piecewise-constant-in-time potential: ``segments`` of (t_start, field)."""

    segments: tuple

    def __post_init__(self):
        segs = tuple((float(t), f) for t, f in self.segments)
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "_starts", [t for t, _ in segs])

    @classmethod
    def constant(cls, field: PolynomialField) -> "PotentialSchedule":
        return cls(((0.0, field),))

    @property
    def dimension(self) -> int:
        return self.segments[0][1].dimension

    def degree(self) -> int:
        return max(f.degree() for _, f in self.segments)

    def lookup(self, t: float) -> PolynomialField:
        """Field of the segment active at time ``t`` (right-continuous)."""
        i = bisect.bisect_right(self._starts, float(t)) - 1
        return self.segments[max(i, 0)][1]

    def shifted(self, extra: PolynomialField) -> "PotentialSchedule":
        """Schedule with ``extra`` added to every segment."""
        return PotentialSchedule(tuple((t, f + extra) for t, f in self.segments))

    def truncated(self, order: int) -> "PotentialSchedule":
        return PotentialSchedule(tuple((t, f.truncated(order)) for t, f in self.segments))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform slicing of [0, T] into N pieces of width epsilon = T/N."""

    T: float
    N: int

    @property
    def epsilon(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)


@dataclass(frozen=True)
class DiscretizationContext:
    grid: TimeGrid
    hbar: float

    @property
    def hbar_tilde(self) -> float:
        """Modified constant of the functional representation, epsilon * hbar."""
        return self.grid.epsilon * self.hbar


@dataclass(frozen=True)
class Model:
    params: PhysicalParams
    potential: PotentialSchedule
    grid: TimeGrid
    order: int = 2
    warnings: tuple = field(default=())

    @property
    def context(self) -> DiscretizationContext:
        return DiscretizationContext(self.grid, self.params.hbar)


def validate_model(
    params: PhysicalParams,
    potential: PotentialSchedule,
    grid: TimeGrid,
    order: int = 2,
) -> Model:
    """Check every invariant of the model inputs.

    Returns a ``Model`` when all invariants hold; otherwise raises
    ``ValidationError`` whose ``issues`` list has one ``(code, message)``
    pair per violation. Orders 3 and 4 are accepted with a
    "truncated closure" warning recorded on the model.
    """
    issues = []
    if not params.mass > 0:
        issues.append(("nonpositive_mass", "nonpositive mass"))
    if not params.hbar > 0:
        issues.append(("nonpositive_hbar", "nonpositive hbar"))
    if not (isinstance(params.dimension, (int, np.integer)) and 1 <= params.dimension <= MAX_DIMENSION):
        issues.append(("bad_dimension", f"dimension must be an integer in 1..{MAX_DIMENSION}"))
    if order not in (2, 3, 4):
        issues.append(("bad_order", "truncation order must be 2, 3 or 4"))

    segs = potential.segments
    if not segs:
        issues.append(("empty_schedule", "potential schedule has no segments"))
    else:
        starts = [t for t, _ in segs]
        if starts[0] != 0.0:
            issues.append(("schedule_start", "first segment must start at t = 0"))
        if any(b <= a for a, b in zip(starts, starts[1:])):
            issues.append(("schedule_order", "segment start times must be strictly increasing"))
        for i, (_, f) in enumerate(segs):
            if f.dimension != params.dimension:
                issues.append(
                    ("dimension_mismatch", f"segment {i} has dimension {f.dimension}, params say {params.dimension}")
                )
            if asymmetry(f.c2) > SYMMETRY_TOL:
                issues.append(("asymmetric_quadratic", "asymmetric quadratic coefficient"))
            for name, t in (("c3", f.c3), ("c4", f.c4)):
                if t is not None and asymmetry(t) > SYMMETRY_TOL:
                    issues.append(("asymmetric_tensor", f"{name} of segment {i} is not fully symmetric"))
            if f.degree() > order:
                issues.append(
                    ("degree_exceeds_truncation", f"segment {i} has degree {f.degree()} > truncation order {order}")
                )
            if not all(np.all(np.isfinite(t)) for t in f.tensors() if t is not None):
                issues.append(("nonfinite_coefficient", f"segment {i} has non-finite coefficients"))

    if not (math.isfinite(grid.T) and grid.T > 0):
        issues.append(("nonpositive_duration", "total duration T must be positive"))
    if not (isinstance(grid.N, (int, np.integer)) and grid.N >= 1):
        issues.append(("bad_slices", "number of slices N must be an integer >= 1"))

    if issues:
        raise ValidationError(issues)
    warnings = ()
    if order > 2:
        warnings = (f"truncated closure: order {order} hierarchy is cut at degree {order}",)
    return Model(params, potential, grid, order, warnings)


def as_point(x, dimension: int) -> np.ndarray:
    """Coerce a scalar or sequence into a length-``dimension`` float vector."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (dimension,):
        raise InputError(f"point has shape {arr.shape}, expected ({dimension},)")
    return arr


def harmonic_field(omega: float, mass: float = 1.0, dimension: int = 1) -> PolynomialField:
    """U = m omega^2 |x|^2 / 2."""
    return PolynomialField.from_series(c2=mass * omega**2 * np.eye(dimension), dimension=dimension)


def linear_field(alpha: Sequence[float] | float, dimension: int = 1) -> PolynomialField:
    """U = alpha . x."""
    return PolynomialField.from_series(c1=np.broadcast_to(np.asarray(alpha, float), (dimension,)), dimension=dimension)
