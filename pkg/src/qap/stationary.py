"""Stationary action eigenvalue over initial coefficients.

lambda(c) is the action eigenvalue of the flow started from the quadratic
coefficient vector c = (s1, s2, rho1, rho2) (rho0 is pure gauge and fixed at
zero). ``find_stationary`` looks for roots of grad lambda; the stationary
value lambda0(x0, xT, T) plays the role of a generating function from which
endpoint predictions and probe responses are derived.

Search blocks
-------------
``block="phase"`` (default) solves d lambda / d s1 = 0 with s2, rho1, rho2
held at the guess, and certifies convergence on the whole phase block
(s1, s2). With a real-valued start (rho = 0) the amplitude stays zero, the
s2 direction is flat on the stationary set, and lambda0 reproduces the
classical action of quadratic potentials exactly.

``block="full"`` searches every component. Because the trace term of f
makes d lambda / d rho2 strictly positive near rho = 0, no finite stationary
point exists for quadratic potentials; this mode reports non-convergence.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import solve_banded
from scipy.optimize import root_scalar

from .dynamics import DEFAULT_STEPS, CoefficientState, evolve
from .errors import (
    AmbiguityError,
    BracketError,
    CausticError,
    InputError,
    NonConvergenceError,
    SingularityError,
    StepSizeError,
)
from .grid import auto_domain, expectation, propagate_grid, state_on_grid
from .model import PhysicalParams, PolynomialField, PotentialSchedule, as_point, harmonic_field, linear_field

GRAD_TOL = 1e-7
FD_STEP = 1e-5
HESS_STEP = 1e-4
MAX_ITER = 40
ENDPOINT_FD = 1e-3
SCAN_POINTS = 16
RICHARDSON_TOL = 1e-3
RESOLUTION_TOL = 1e-8    # lambda change under step doubling at an accepted point


# --------------------------------------------------------------------------
# coefficient vector
# --------------------------------------------------------------------------

def vector_length(dimension: int) -> int:
    return 2 * dimension + dimension * (dimension + 1)


def _tri(D):
    return np.triu_indices(D)


def pack(state: CoefficientState) -> np.ndarray:
    """c = (s1, upper(s2), rho1, upper(rho2)); rho0 and higher orders dropped."""
    iu = _tri(state.dimension)
    return np.concatenate([state.s1, state.s2[iu], state.rho1, state.rho2[iu]])


def unpack(c, dimension: int = 1) -> CoefficientState:
    D = dimension
    c = np.asarray(c, dtype=float)
    if c.shape != (vector_length(D),):
        raise InputError(f"coefficient vector must have length {vector_length(D)}")
    k = D * (D + 1) // 2
    iu = _tri(D)

    def sym(v):
        a = np.zeros((D, D))
        a[iu] = v
        return a + np.triu(a, 1).T

    s1, s2, r1, r2 = np.split(c, [D, D + k, 2 * D + k])
    return CoefficientState(0.0, s1, sym(s2), 0.0, r1, sym(r2))


def block_indices(dimension: int, block: str) -> tuple[np.ndarray, np.ndarray]:
    """(searched, certified) index sets for a search block."""
    D = dimension
    k = D * (D + 1) // 2
    if block == "phase":
        return np.arange(D), np.arange(D + k)
    if block == "full":
        every = np.arange(vector_length(D))
        return every, every
    raise InputError(f"unknown block {block!r}")


@dataclass(frozen=True, eq=False)
class StationaryResult:
    c_star: np.ndarray
    lambda0: float
    grad_norm: float
    iterations: int
    converged: bool
    multistart_index: int
    attempts: tuple = field(default=(), compare=False)

    def state(self, dimension: int = 1) -> CoefficientState:
        return unpack(self.c_star, dimension)

    def __eq__(self, other):
        if not isinstance(other, StationaryResult):
            return NotImplemented
        return (np.array_equal(self.c_star, other.c_star) and self.lambda0 == other.lambda0
                and self.grad_norm == other.grad_norm and self.iterations == other.iterations
                and self.converged == other.converged
                and self.multistart_index == other.multistart_index)


# --------------------------------------------------------------------------
# objective and derivatives
# --------------------------------------------------------------------------

def lambda_of_initial(c, x0, xT, T: float, potential: PotentialSchedule, params: PhysicalParams,
                      steps: int = DEFAULT_STEPS) -> float:
    """Action eigenvalue of the flow started from ``c``; caustics propagate."""
    D = potential.dimension
    state = unpack(c, D)
    return evolve(state, potential, T, params, steps=steps, x0=x0, xT=xT).lambda_


def _fd_steps(c, idx, h):
    return h * np.maximum(1.0, np.abs(c[idx]))


def fd_gradient(fun, c, idx, h=FD_STEP) -> np.ndarray:
    """Central differences of ``fun`` along the components ``idx``."""
    c = np.asarray(c, float)
    out = np.empty(len(idx))
    for j, (i, hi) in enumerate(zip(idx, _fd_steps(c, idx, h))):
        e = np.zeros_like(c)
        e[i] = hi
        out[j] = (fun(c + e) - fun(c - e)) / (2 * hi)
    return out


def _fd_hessian(fun, c, idx, h=HESS_STEP):
    c = np.asarray(c, float)
    k = len(idx)
    hs = _fd_steps(c, idx, h)
    f0 = fun(c)
    H = np.empty((k, k))
    for a in range(k):
        ea = np.zeros_like(c)
        ea[idx[a]] = hs[a]
        H[a, a] = (fun(c + ea) - 2 * f0 + fun(c - ea)) / hs[a] ** 2
        for b in range(a + 1, k):
            eb = np.zeros_like(c)
            eb[idx[b]] = hs[b]
            H[a, b] = H[b, a] = (
                fun(c + ea + eb) - fun(c + ea - eb) - fun(c - ea + eb) + fun(c - ea - eb)
            ) / (4 * hs[a] * hs[b])
    return H


def default_guesses(x0, xT, T: float, potential: PotentialSchedule, params: PhysicalParams) -> list:
    """Zero vector, classical-momentum seed, ground-state-width seed."""
    D = potential.dimension
    x0 = as_point(x0, D)
    xT = as_point(xT, D)
    m, hbar = params.mass, params.hbar
    zero = np.zeros(vector_length(D))
    classical = CoefficientState.make(s1=m * (xT - x0) / T, dimension=D)
    curv = np.linalg.eigvalsh(potential.lookup(0.0).c2)
    omega = math.sqrt(max(float(np.max(curv)), 0.0) / m) or 1.0 / T
    width = CoefficientState.make(s1=m * (xT - x0) / T, rho2=-m * omega / hbar, dimension=D)
    return [zero, pack(classical), pack(width)]


def _newton(fun, c, search, certify, tol, fd_step, max_iter):
    """Damped Newton on the searched gradient block; returns (c, grad_norm, iterations, note)."""
    c = np.array(c, float)
    g = fd_gradient(fun, c, search, fd_step)
    cert = np.linalg.norm(fd_gradient(fun, c, certify, fd_step))
    it = 0
    while cert >= tol and it < max_iter:
        if np.linalg.norm(g) < 0.1 * tol:
            return c, cert, it, "stationary in the searched block only"
        it += 1
        H = _fd_hessian(fun, c, search)
        step, *_ = np.linalg.lstsq(H, -g, rcond=1e-12)
        gnorm = np.linalg.norm(g)
        t = 1.0
        for _ in range(30):
            trial = c.copy()
            trial[search] += t * step
            try:
                g_trial = fd_gradient(fun, trial, search, fd_step)
            except SingularityError:
                g_trial = None
            if g_trial is not None and np.linalg.norm(g_trial) < gnorm * (1 - 1e-4 * t) + tol:
                break
            t *= 0.5
        else:
            return c, cert, it, "line search stalled"
        c, g = trial, g_trial
        cert = np.linalg.norm(fd_gradient(fun, c, certify, fd_step))
    return c, cert, it, "" if cert < tol else "iteration limit"


def _search(x0, xT, T, potential, params, guesses, fd_step, tol, block, steps, max_iter, workers):
    D = potential.dimension
    x0 = as_point(x0, D)
    xT = as_point(xT, D)
    search, certify = block_indices(D, block)

    def fun(c):
        return lambda_of_initial(c, x0, xT, T, potential, params, steps)

    def attempt(item):
        index, guess = item
        try:
            c, gn, it, note = _newton(fun, guess, search, certify, tol, fd_step, max_iter)
            lam = fun(c)
            ok = gn < tol
            if ok:
                # a root of the discretized objective only counts if the
                # integrator resolves the flow there
                finer = lambda_of_initial(c, x0, xT, T, potential, params, 2 * steps)
                if abs(finer - lam) > RESOLUTION_TOL * max(1.0, abs(lam)):
                    ok = False
                    note = f"unresolved by the integrator (step doubling moves lambda by {abs(finer - lam):.2e})"
            return StationaryResult(c, lam, float(gn), it, ok, index), note
        except SingularityError as err:
            return None, f"caustic at t = {err.t:.6g}"

    items = [(i, np.array(g, dtype=float)) for i, g in enumerate(guesses)]
    for _, g in items:
        if g.shape != (vector_length(D),):
            raise InputError(f"guess must have length {vector_length(D)}")
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(attempt, items))
    else:
        outcomes = [attempt(item) for item in items]

    log = tuple(
        (i, "converged" if r is not None and r.converged else note or "not converged",
         float("inf") if r is None else r.grad_norm)
        for i, (r, note) in enumerate(outcomes)
    )
    found = [r for r, _ in outcomes if r is not None]
    if not found:
        return None, log
    best = min(found, key=lambda r: (not r.converged, r.grad_norm, r.multistart_index))
    return StationaryResult(best.c_star, best.lambda0, best.grad_norm, best.iterations,
                            best.converged, best.multistart_index, log), log


def find_stationary(x0, xT, T: float, potential: PotentialSchedule, params: PhysicalParams,
                    guesses: Optional[Sequence] = None, fd_step: float = FD_STEP,
                    tol: float = GRAD_TOL, block: str = "phase", steps: int = DEFAULT_STEPS,
                    max_iter: int = MAX_ITER, workers: int = 1,
                    strict: bool = True) -> Optional[StationaryResult]:
    """Stationary point of lambda over initial coefficients (multi-start).

    Returns the converged attempt with the smallest certified gradient norm
    (ties: lowest guess index). Raises NonConvergenceError when no guess
    converges; attempts that hit a caustic are abandoned and logged.
    With ``strict=False`` the best unconverged attempt (or None) is
    returned instead of raising.
    """
    if guesses is None:
        guesses = default_guesses(x0, xT, T, potential, params)
    if len(guesses) == 0:
        raise InputError("at least one guess is required")
    best, log = _search(x0, xT, T, potential, params, guesses, fd_step, tol, block, steps,
                        max_iter, workers)
    if not strict:
        return best
    if best is None or not best.converged:
        grad = float("inf") if best is None else best.grad_norm
        raise NonConvergenceError(
            f"no stationary point from {len(guesses)} guesses (best gradient norm {grad:.3e})",
            grad, log,
        )
    return best


# --------------------------------------------------------------------------
# classical references
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """One-dimensional reference system: free, linear (U = alpha x) or harmonic."""

    kind: str = "free"
    mass: float = 1.0
    omega: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("free", "linear", "harmonic"):
            raise InputError(f"unknown scenario kind {self.kind!r}")

    def field(self) -> PolynomialField:
        if self.kind == "harmonic":
            return harmonic_field(self.omega, self.mass)
        if self.kind == "linear":
            return linear_field(self.alpha)
        return PolynomialField.zero(1)

    def potential(self) -> PotentialSchedule:
        return PotentialSchedule.constant(self.field())

    def params(self, hbar: float = 1.0) -> PhysicalParams:
        return PhysicalParams(mass=self.mass, hbar=hbar, dimension=1)

    def reference(self, x0: float, xT: float, T: float) -> float:
        return classical_action_reference(self.kind, self.mass, x0, xT, T,
                                          omega=self.omega, alpha=self.alpha)


def classical_action_reference(kind: str, mass: float, x0: float, xT: float, T: float,
                               omega: float = 1.0, alpha: float = 0.0) -> float:
    """Closed-form classical action of the extremal path from x0 at 0 to xT at T."""
    m = mass
    dx = xT - x0
    if kind == "free":
        return m * dx**2 / (2 * T)
    if kind == "linear":
        return m * dx**2 / (2 * T) - alpha * T * (x0 + xT) / 2 - alpha**2 * T**3 / (24 * m)
    if kind == "harmonic":
        s = math.sin(omega * T)
        if abs(s) < 1e-12:
            raise CausticError(f"omega T = {omega * T:.6g} is a caustic (sin(omega T) = 0)")
        return m * omega / (2 * s) * ((x0**2 + xT**2) * math.cos(omega * T) - 2 * x0 * xT)
    raise InputError(f"unknown kind {kind!r}")


def discrete_action_extremum(field: PolynomialField, mass: float, x0: float, xT: float, T: float,
                             N: int = 4000) -> float:
    """Extremal value of the time-sliced action over broken lines.

    S = sum m (x_{n+1}-x_n)^2 / (2 eps) - eps * sum_n w_n U(x_n) with trapezoid
    weights; for a quadratic U the stationarity conditions are a tridiagonal
    linear system in the interior vertices.
    """
    if field.dimension != 1 or field.degree() > 2:
        raise InputError("brute-force extremization needs a 1-D quadratic potential")
    eps = T / N
    a, b = float(field.c1[0]), float(field.c2[0, 0])
    n = N - 1
    ab = np.zeros((3, n))
    ab[0, 1:] = -mass / eps
    ab[1, :] = 2 * mass / eps - eps * b
    ab[2, :-1] = -mass / eps
    rhs = np.full(n, eps * a)
    rhs[0] += mass / eps * x0
    rhs[-1] += mass / eps * xT
    x = np.concatenate([[x0], solve_banded((1, 1), ab, rhs), [xT]])
    U = field.c0 + a * x + 0.5 * b * x**2
    w = np.full(N + 1, eps)
    w[[0, -1]] = eps / 2
    return float(np.sum(mass * np.diff(x) ** 2 / (2 * eps)) - np.sum(w * U))


# --------------------------------------------------------------------------
# classical-limit sweep
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    hbar: float
    lambda0: float
    I_cl: float
    rel_error: float
    grad_norm: float
    converged: bool

    HEADER = ("hbar", "lambda0", "I_cl", "rel_error", "grad_norm", "converged")

    def as_tuple(self):
        return (self.hbar, self.lambda0, self.I_cl, self.rel_error, self.grad_norm, self.converged)


def classical_limit_sweep(hbar_list: Sequence[float], scenario: Scenario, x0: float, xT: float,
                          T: float, block: str = "phase", steps: int = DEFAULT_STEPS) -> list:
    """lambda0 against the classical action for a descending list of hbar.

    Each row warm-starts from the previous row's stationary point.
    Rows that fail to converge are kept and flagged.
    """
    hbars = [float(h) for h in hbar_list]
    if any(b >= a for a, b in zip(hbars, hbars[1:])):
        raise InputError("hbar_list must be strictly descending")
    I_cl = scenario.reference(x0, xT, T)
    potential = scenario.potential()
    rows, warm = [], None
    for hbar in hbars:
        params = scenario.params(hbar)
        guesses = default_guesses(x0, xT, T, potential, params)
        if warm is not None:
            guesses = [warm] + guesses
        res = find_stationary(x0, xT, T, potential, params, guesses=guesses, block=block,
                              steps=steps, strict=False)
        if res is None:
            rows.append(SweepRow(hbar, math.nan, I_cl, math.nan, math.inf, False))
            continue
        if res.converged:
            warm = res.c_star
        rel = abs(res.lambda0 - I_cl) / abs(I_cl) if I_cl != 0 else abs(res.lambda0)
        rows.append(SweepRow(hbar, res.lambda0, I_cl, rel, res.grad_norm, res.converged))
    return rows


# --------------------------------------------------------------------------
# endpoint prediction
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointPrediction:
    xT: float
    pT: float
    residual: float
    evaluations: int


class _Lambda0:
    """lambda0(x0, xT) with warm starts shared between calls."""

    def __init__(self, T, potential, params, steps, block):
        self.T, self.potential, self.params = T, potential, params
        self.steps, self.block = steps, block
        self.warm = None
        self.calls = 0

    def __call__(self, x0, xT):
        self.calls += 1
        res = None
        if self.warm is not None:
            res = find_stationary(x0, xT, self.T, self.potential, self.params, guesses=[self.warm],
                                  block=self.block, steps=self.steps, strict=False)
        if res is None or not res.converged:
            res = find_stationary(x0, xT, self.T, self.potential, self.params,
                                  block=self.block, steps=self.steps)
        self.warm = res.c_star
        return res.lambda0

    def d_x0(self, x0, xT, h=ENDPOINT_FD):
        return (self(x0 + h, xT) - self(x0 - h, xT)) / (2 * h)

    def d_xT(self, x0, xT, h=ENDPOINT_FD):
        return (self(x0, xT + h) - self(x0, xT - h)) / (2 * h)


def predict_endpoint(x0: float, p0: float, T: float, potential: PotentialSchedule,
                     params: PhysicalParams, bracket: tuple[float, float],
                     steps: int = DEFAULT_STEPS, block: str = "phase",
                     xtol: float = 1e-12) -> EndpointPrediction:
    """Solve d lambda0 / d x0 (x0, xT) = -p0 for xT; then pT = d lambda0 / d xT.

    The bracket is scanned at 16 points; no sign change raises BracketError
    and more than one raises AmbiguityError with the candidate intervals.
    """
    if potential.dimension != 1:
        raise InputError("endpoint prediction is one-dimensional")
    lo, hi = map(float, bracket)
    if not hi > lo:
        raise InputError("bracket must satisfy lo < hi")
    lam = _Lambda0(T, potential, params, steps, block)

    def g(xT):
        return lam.d_x0(x0, xT) + p0

    grid = np.linspace(lo, hi, SCAN_POINTS)
    vals = np.array([g(x) for x in grid])
    intervals = []
    for i in range(SCAN_POINTS - 1):
        if vals[i] == 0.0:
            intervals.append((grid[i], grid[i]))
        elif vals[i] * vals[i + 1] < 0:
            intervals.append((grid[i], grid[i + 1]))
    if vals[-1] == 0.0:
        intervals.append((grid[-1], grid[-1]))
    if not intervals:
        raise BracketError(f"no sign change of dlambda0/dx0 + p0 on [{lo}, {hi}]")
    if len(intervals) > 1:
        raise AmbiguityError(f"{len(intervals)} candidate endpoints in [{lo}, {hi}]", intervals)
    a, b = intervals[0]
    if a == b:
        root = a
    else:
        coarse = root_scalar(g, bracket=(a, b), method="bisect", xtol=(b - a) * 1e-3)
        x1 = coarse.root
        fine = root_scalar(g, x0=x1, x1=x1 + (b - a) * 1e-4, method="secant", xtol=xtol)
        root = fine.root if fine.converged and a <= fine.root <= b else x1
    return EndpointPrediction(float(root), float(lam.d_xT(x0, root)), float(g(root)), lam.calls)


# --------------------------------------------------------------------------
# probe response
# --------------------------------------------------------------------------

def _central(fn, step):
    return (fn(step) - fn(-step)) / (2 * step)


def probe_sensitivity(g: PolynomialField, alpha_step: float, x0, xT, T: float,
                      potential: PotentialSchedule, params: PhysicalParams,
                      mode: str = "at_stationary", c=None, steps: int = DEFAULT_STEPS,
                      block: str = "phase") -> float:
    """d lambda / d alpha at alpha = 0 for the perturbation U -> U + alpha g.

    ``at_fixed_c`` keeps the initial coefficients (default: the stationary
    point of the unperturbed problem); ``at_stationary`` re-solves the
    stationary problem at every alpha. Central differences at alpha_step and
    alpha_step/2 must agree to 1e-3 relative; the Richardson-extrapolated
    value is returned.
    """
    if mode not in ("at_fixed_c", "at_stationary"):
        raise InputError(f"unknown mode {mode!r}")
    if not alpha_step > 0:
        raise InputError("alpha_step must be positive")
    if g.degree() > 2:
        raise InputError("probe degree exceeds the quadratic truncation")
    base = find_stationary(x0, xT, T, potential, params, block=block, steps=steps)
    c_fixed = base.c_star if c is None else np.asarray(c, float)

    def lam(alpha):
        pot = potential.shifted(g * alpha)
        if mode == "at_fixed_c":
            return lambda_of_initial(c_fixed, x0, xT, T, pot, params, steps)
        guesses = [base.c_star] + default_guesses(x0, xT, T, pot, params)
        return find_stationary(x0, xT, T, pot, params, guesses=guesses, block=block,
                               steps=steps).lambda0

    d1 = _central(lam, alpha_step)
    d2 = _central(lam, alpha_step / 2)
    if abs(d1 - d2) > RICHARDSON_TOL * max(abs(d2), np.finfo(float).tiny):
        raise StepSizeError(f"Richardson check failed: {d1:.9g} vs {d2:.9g}")
    return float((4 * d2 - d1) / 3)


def probe_grid_crosscheck(g: PolynomialField, stationary: StationaryResult, x0: float, T: float,
                          potential: PotentialSchedule, params: PhysicalParams,
                          width: float = 1.0, M: int = 1024, steps: int = 4096,
                          samples: int = 64) -> float:
    """-int_0^T <g> dt from the grid solver.

    A normalizable packet of density width ``width`` centred on x0 carries
    the stationary phase coefficients; its mean of g is sampled along the
    grid evolution and integrated with Simpson's rule.
    """
    s = stationary.state(1)
    rho2 = -1.0 / (2 * width**2)
    packet = s.replace(rho1=np.array([-rho2 * x0]), rho2=np.array([[rho2]]))
    flow = evolve(packet, potential, T, params, steps=steps)
    xmin, xmax = auto_domain(flow)
    psi = state_on_grid(packet, params.hbar, xmin, xmax, M)
    times = np.linspace(0.0, T, samples + 1)
    values = [expectation(psi, g)]
    chunk = max(1, steps // samples)
    for _ in range(samples):
        psi = propagate_grid(psi, potential, params, T / samples, chunk)
        values.append(expectation(psi, g))
    return float(-simpson(np.array(values), x=times))
