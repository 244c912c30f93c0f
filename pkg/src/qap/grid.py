"""Independent 1-D grid solver for the ordinary Schroedinger equation.

    i hbar psi_t = -(hbar^2 / 2m) psi_xx + U(x, t) psi

Crank-Nicolson in time, three-point Laplacian in space, Dirichlet walls.
The potential is sampled at the midpoint of each step. The solver knows
nothing about coefficient flows; it exists to check them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .dynamics import CoefficientState, EvolutionResult, evolve
from .errors import DomainError, InputError, PreconditionError
from .model import PhysicalParams, PolynomialField, PotentialSchedule

MIN_POINTS = 256
DEFAULT_POINTS = 1024
EDGE_TOL = 1e-8          # valid comparison
EDGE_ABORT = 1e-6        # contamination during propagation
DOMAIN_SIGMAS = 10.0


@dataclass(frozen=True, eq=False)
class GridState:
    xmin: float
    xmax: float
    M: int
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if self.M < MIN_POINTS:
            raise InputError(f"grid needs at least {MIN_POINTS} points, got {self.M}")
        if not self.xmax > self.xmin:
            raise InputError("xmax must exceed xmin")
        if v.shape != (self.M,):
            raise InputError(f"values must have length {self.M}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.xmin, self.xmax, self.M)

    @property
    def dx(self) -> float:
        return (self.xmax - self.xmin) / (self.M - 1)

    def norm(self) -> float:
        return float(np.sqrt(np.trapezoid(np.abs(self.values) ** 2, dx=self.dx)))

    def edge_ratio(self) -> float:
        """Largest edge magnitude relative to the peak magnitude."""
        return _edge_ratio(self.values)

    def same_grid(self, other: "GridState") -> bool:
        return self.M == other.M and self.xmin == other.xmin and self.xmax == other.xmax


def _edge_ratio(v) -> float:
    peak = np.max(np.abs(v))
    if peak == 0:
        return float("inf")
    return float(max(abs(v[0]), abs(v[-1])) / peak)


def field_on_grid(field: PolynomialField, x: np.ndarray) -> np.ndarray:
    """Vectorized value of a 1-D polynomial field."""
    if field.dimension != 1:
        raise InputError("grid solver is one-dimensional")
    out = field.c0 + field.c1[0] * x + 0.5 * field.c2[0, 0] * x**2
    if field.c3 is not None:
        out = out + field.c3.ravel()[0] * x**3 / 6.0
    if field.c4 is not None:
        out = out + field.c4.ravel()[0] * x**4 / 24.0
    return out


def state_on_grid(state: CoefficientState, hbar: float, xmin: float, xmax: float,
                  M: int = DEFAULT_POINTS) -> GridState:
    """Sample exp(rho(x) + i s(x)/hbar) on a uniform grid."""
    if state.dimension != 1:
        raise InputError("grid solver is one-dimensional")
    x = np.linspace(xmin, xmax, M)
    rho = field_on_grid(state.amplitude_field(), x)
    s = field_on_grid(state.phase_field(), x)
    return GridState(xmin, xmax, M, np.exp(rho + 1j * s / hbar), state.t)


def gaussian_envelope(result: EvolutionResult):
    """Centre and width of |psi|^2 along a 1-D quadratic flow.

    Returns arrays ``(mu, sigma)`` at the result's nodes.
    """
    if result.dimension != 1:
        raise InputError("grid solver is one-dimensional")
    r1 = result.rho1[:, 0]
    r2 = result.rho2[:, 0, 0]
    if np.any(r2 >= 0):
        raise PreconditionError("state is not normalizable along the flow (rho2 >= 0)")
    return -r1 / r2, np.sqrt(-0.5 / r2)


def auto_domain(result: EvolutionResult, sigmas: float = DOMAIN_SIGMAS) -> tuple[float, float]:
    """Window covering +-``sigmas`` density widths around the packet path."""
    mu, sigma = gaussian_envelope(result)
    return float(np.min(mu - sigmas * sigma)), float(np.max(mu + sigmas * sigma))


def propagate_grid(initial: GridState, potential: PotentialSchedule, params: PhysicalParams,
                   T: float, steps: int) -> GridState:
    """Crank-Nicolson evolution of ``initial`` over a duration ``T``.

    Raises DomainError if the initial state is not negligible at the walls
    or if the edge magnitude ever exceeds 1e-6 of the peak.
    """
    if steps < 1 or not T > 0:
        raise InputError("need T > 0 and steps >= 1")
    if potential.dimension != 1:
        raise InputError("grid solver is one-dimensional")
    if initial.edge_ratio() >= EDGE_TOL:
        raise DomainError(f"initial state not negligible at the walls ({initial.edge_ratio():.2e})")

    hbar, m = params.hbar, params.mass
    x, dx = initial.x, initial.dx
    dt = T / steps
    kin = hbar**2 / (2 * m * dx**2)
    off = np.full(initial.M, -kin, dtype=complex)
    ab = np.zeros((3, initial.M), dtype=complex)
    psi = np.array(initial.values)

    cached_field = None
    for k in range(steps):
        t_mid = initial.t + (k + 0.5) * dt
        field = potential.lookup(t_mid)
        if field is not cached_field:
            diag = 2 * kin + field_on_grid(field, x)
            a = 0.5j * dt / hbar
            ab[0, 1:] = a * off[1:]
            ab[1, :] = 1 + a * diag
            ab[2, :-1] = a * off[:-1]
            cached_field = field
        rhs = (1 - a * diag) * psi
        rhs[1:] -= a * off[1:] * psi[:-1]
        rhs[:-1] -= a * off[:-1] * psi[1:]
        psi = solve_banded((1, 1), ab, rhs, check_finite=False)
        if _edge_ratio(psi) > EDGE_ABORT:
            raise DomainError(f"wave function reached the walls at t = {t_mid + 0.5 * dt:.6g}")
    return GridState(initial.xmin, initial.xmax, initial.M, psi, initial.t + T)


def _inner(a: GridState, b: GridState) -> complex:
    if not a.same_grid(b):
        raise InputError("states live on different grids")
    return complex(np.trapezoid(np.conj(a.values) * b.values, dx=a.dx))


def compare_states(a: GridState, b: GridState) -> tuple[float, float]:
    """Fidelity |<a,b>|/(|a||b|) and relative phase arg<a,b>."""
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise InputError("zero-norm state")
    ip = _inner(a, b)
    fid = min(1.0, abs(ip) / (na * nb))
    phase = float(np.angle(ip))
    if phase == -np.pi:
        phase = np.pi
    return float(fid), phase


def expectation(state: GridState, g: PolynomialField) -> float:
    """<g> with respect to |psi|^2, trapezoid rule."""
    w = np.abs(state.values) ** 2
    return float(np.trapezoid(field_on_grid(g, state.x) * w, dx=state.dx)
                 / np.trapezoid(w, dx=state.dx))


@dataclass(frozen=True)
class OracleComparison:
    fidelity: float
    phase: float
    predicted_phase: float
    norm_drift: float
    xmin: float
    xmax: float

    @property
    def phase_error(self) -> float:
        d = self.phase - self.predicted_phase
        return float(abs((d + np.pi) % (2 * np.pi) - np.pi))


def oracle_compare(initial: CoefficientState, potential: PotentialSchedule, params: PhysicalParams,
                   T: float, M: int = DEFAULT_POINTS, steps: int = 4096,
                   flow_steps: int = 4096) -> OracleComparison:
    """Run both pipelines from the same Gaussian and compare at ``T``.

    The coefficient pipeline carries no global phase (it is booked into the
    eigenvalue), so the grid should lead it by -(1/hbar) * integral of f.
    """
    flow = evolve(initial, potential, T, params, steps=flow_steps)
    xmin, xmax = auto_domain(flow)
    start = state_on_grid(initial, params.hbar, xmin, xmax, M)
    end = propagate_grid(start, potential, params, T, steps)
    predicted = state_on_grid(flow.final, params.hbar, xmin, xmax, M)
    fid, phase = compare_states(predicted, end)
    return OracleComparison(
        fidelity=fid,
        phase=phase,
        predicted_phase=-flow.integral_f() / params.hbar,
        norm_drift=abs(end.norm() / start.norm() - 1.0),
        xmin=xmin,
        xmax=xmax,
    )
