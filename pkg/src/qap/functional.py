"""Time-sliced wave functional on broken lines.

The trajectory is replaced by vertices x_0 ... x_N on a uniform grid of
width epsilon, and the wave functional by the product of per-slice wave
functions ``psi_n = exp(chi_n(x_n))``. Acting with the discrete action
operator and dividing by the product gives

    Lambda[x] = sum_{n=1..N} eps [ (hbar/i) v_n . grad chi_n
                                   + (hbar^2/2m)(grad chi_n^2 + lap chi_n)
                                   - U(x_n, t_n) ],   v_n = (x_n - x_{n-1})/eps

whose real part splits into the path-independent eigenvalue

    lambda_N = s_N(x_N) - s_0(x_0) - sum_{n=1..N} eps f_n

plus a residual built from the per-slice Schroedinger residual and the
chain-rule error of turning the velocity term into a telescoping sum.
The residual vanishes as N grows for smooth coefficient flows.

Probabilities use ``|Psi|^2 = prod_n exp(2 rho_n(x_n))`` over the nodes
n = 0 ... N and Gauss-Legendre quadrature per axis.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import CoefficientState, EvolutionResult, rhs
from .errors import EvaluationError, InputError, PreconditionError, ConsistencyError
from .model import (
    DiscretizationContext,
    PhysicalParams,
    PolynomialField,
    PotentialSchedule,
    TimeGrid,
    as_point,
    eval_poly_jet,
)

GL_POINTS = 64
SUPPORT_SIGMAS = 8.0
DENSE_MAX_NODES = 7          # N <= 6
DENSE_BUDGET = 1 << 24       # integrand evaluations per dense quadrature
FACTORIZATION_TOL = 1e-6


@dataclass(frozen=True)
class BrokenLine:
    """Piecewise-linear path: vertices[n] is x(t_n), n = 0 ... N."""

    grid: TimeGrid
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.N + 1:
            raise InputError(f"broken line needs {self.grid.N + 1} vertices, got {v.shape[0]}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def dimension(self) -> int:
        return self.vertices.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.vertices[0]

    @property
    def xT(self) -> np.ndarray:
        return self.vertices[-1]

    def perturbed(self, n: int, k: int, h: float) -> "BrokenLine":
        v = self.vertices.copy()
        v[n, k] += h
        return BrokenLine(self.grid, v)


@dataclass(frozen=True)
class Slice:
    """Closed-form data of one time slice: chi = (i/hbar) phase + amplitude."""

    t: float
    phase: PolynomialField
    amplitude: PolynomialField
    phase_rate: PolynomialField
    amplitude_rate: PolynomialField
    f: float
    state: CoefficientState

    def chi_jet(self, x, hbar):
        """Complex value, gradient and Laplacian of chi at x."""
        sv, sg, sl = eval_poly_jet(self.phase, x)
        rv, rg, rl = eval_poly_jet(self.amplitude, x)
        return complex(rv, sv / hbar), rg + 1j * sg / hbar, complex(rl, sl / hbar)

    def chi_rate(self, x, hbar) -> complex:
        """Partial time derivative of chi at x (from the coefficient flow)."""
        sv = eval_poly_jet(self.phase_rate, x)[0]
        rv = eval_poly_jet(self.amplitude_rate, x)[0]
        return complex(rv, sv / hbar)


@dataclass(frozen=True)
class SliceSet:
    slices: tuple
    context: DiscretizationContext
    lambda_continuum: float

    @property
    def N(self) -> int:
        return self.context.grid.N

    @property
    def epsilon(self) -> float:
        return self.context.grid.epsilon

    @property
    def hbar(self) -> float:
        return self.context.hbar

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, n) -> Slice:
        return self.slices[n]


@dataclass(frozen=True)
class LambdaDecomposition:
    """Real/imaginary parts of Lambda = (I Psi)/Psi and their bookkeeping.

    ``lambda_re = lambda_discrete + residual_re`` where ``residual_re`` is
    computed independently from the per-slice Schroedinger residual and the
    chain-rule error. The imaginary part is reported only.
    """

    lambda_re: float
    lambda_im: float
    residual_re: float
    boundary_im: float
    lambda_discrete: float

    @property
    def value(self) -> complex:
        return complex(self.lambda_re, self.lambda_im)


def build_slices(result: EvolutionResult, context: DiscretizationContext) -> SliceSet:
    """Sample the evolution at the N + 1 nodes of the discretization grid."""
    steps = result.steps
    grid = context.grid
    if not math.isclose(grid.T, result.T, rel_tol=1e-12, abs_tol=1e-15):
        raise InputError(f"grid duration {grid.T} differs from evolution duration {result.T}")
    if steps % grid.N:
        raise InputError(f"evolution steps ({steps}) are not a multiple of N ({grid.N})")
    stride = steps // grid.N
    params = result.params
    slices = []
    for n in range(grid.N + 1):
        i = n * stride
        st = result.state_at(i)
        U = result.potential.lookup(result.times[i])
        d = rhs(st, U, params)
        slices.append(
            Slice(
                float(result.times[i]),
                st.phase_field(),
                st.amplitude_field(),
                d.phase_field(),
                d.amplitude_field(),
                float(result.f_samples[i]),
                st,
            )
        )
    return SliceSet(tuple(slices), context, float(result.lambda_))


def lambda_discrete(slices: SliceSet, x0, xT) -> float:
    """lambda_N = s_N(x_T) - s_0(x_0) - sum_{n=1..N} eps f_n."""
    D = slices[0].phase.dimension
    sT = eval_poly_jet(slices[-1].phase, as_point(xT, D))[0]
    s0 = eval_poly_jet(slices[0].phase, as_point(x0, D))[0]
    eps = slices.epsilon
    return sT - s0 - sum(eps * sl.f for sl in slices.slices[1:])


def _check_path(slices: SliceSet, path: BrokenLine):
    if path.grid.N != slices.N or not math.isclose(path.grid.T, slices.context.grid.T):
        raise InputError("path grid differs from slice grid")
    if path.dimension != slices[0].phase.dimension:
        raise InputError("path dimension differs from slice dimension")


def _analytic_lambda(slices, path, potential, params):
    hbar, m, eps = params.hbar, params.mass, slices.epsilon
    X = path.vertices
    total = 0j
    for n in range(1, slices.N + 1):
        sl = slices[n]
        _, g, lap = sl.chi_jet(X[n], hbar)
        v = (X[n] - X[n - 1]) / eps
        U = eval_poly_jet(potential.lookup(sl.t), X[n])[0]
        total += eps * ((hbar / 1j) * (v @ g) + hbar**2 / (2 * m) * (g @ g + lap) - U)
    return total


def _fd_lambda(slices, path, potential, params, fd_step, fd_step2):
    hbar, m, eps = params.hbar, params.mass, slices.epsilon
    X = path.vertices

    def psi(Y):
        value = np.prod([np.exp(slices[n].chi_jet(Y[n], hbar)[0]) for n in range(1, slices.N + 1)])
        if value == 0 or not np.isfinite(value):
            raise EvaluationError(
                "wave functional under/overflows at this path; use mode='analytic'"
            )
        return value

    base = psi(X)
    acc = 0j
    for n in range(1, slices.N + 1):
        sl = slices[n]
        v = (X[n] - X[n - 1]) / eps
        U = eval_poly_jet(potential.lookup(sl.t), X[n])[0]
        grad = np.zeros(X.shape[1], dtype=complex)
        lap = 0j
        for k in range(X.shape[1]):
            Y = X.copy()
            Y[n, k] += fd_step
            plus = psi(Y)
            Y[n, k] -= 2 * fd_step
            minus = psi(Y)
            grad[k] = (plus - minus) / (2 * fd_step)
            Y[n, k] = X[n, k] + fd_step2
            plus2 = psi(Y)
            Y[n, k] = X[n, k] - fd_step2
            minus2 = psi(Y)
            lap += (plus2 - 2 * base + minus2) / fd_step2**2
        acc += eps * ((hbar / 1j) * (v @ grad) + hbar**2 / (2 * m) * lap - U * base)
    return acc / base


def _residual(slices, path, potential, params):
    """Sum of eps * Sch(psi_n)/psi_n plus the chain-rule error (real/complex)."""
    hbar, m, eps = params.hbar, params.mass, slices.epsilon
    X = path.vertices
    total = 0j
    for n in range(1, slices.N + 1):
        sl, prev = slices[n], slices[n - 1]
        chi_n, g, lap = sl.chi_jet(X[n], hbar)
        chi_prev = prev.chi_jet(X[n - 1], hbar)[0]
        rate = sl.chi_rate(X[n], hbar)
        U = eval_poly_jet(potential.lookup(sl.t), X[n])[0]
        sch = 1j * hbar * rate + hbar**2 / (2 * m) * (g @ g + lap) - U + sl.f
        chain = (hbar / 1j) * ((X[n] - X[n - 1]) @ g - (chi_n - chi_prev) + eps * rate)
        total += eps * sch + chain
    return total


def apply_action_operator(
    slices: SliceSet,
    path: BrokenLine,
    potential: PotentialSchedule,
    params: PhysicalParams,
    mode: str = "analytic",
    fd_step: float = 1e-5,
    fd_step2: float = 1e-4,
) -> LambdaDecomposition:
    """Apply the discrete action operator to the product wave functional.

    ``mode='analytic'`` uses closed-form jets of chi; ``'finite_difference'``
    differentiates the full product numerically (central differences, step
    ``fd_step`` for first and ``fd_step2`` for second derivatives).
    """
    _check_path(slices, path)
    if mode == "analytic":
        lam = _analytic_lambda(slices, path, potential, params)
    elif mode == "finite_difference":
        lam = _fd_lambda(slices, path, potential, params, fd_step, fd_step2)
    else:
        raise InputError(f"unknown mode {mode!r}")
    hbar = params.hbar
    X = path.vertices
    resid = _residual(slices, path, potential, params)
    rho_T = eval_poly_jet(slices[-1].amplitude, X[-1])[0]
    rho_0 = eval_poly_jet(slices[0].amplitude, X[0])[0]
    return LambdaDecomposition(
        lambda_re=float(lam.real),
        lambda_im=float(lam.imag),
        residual_re=float(resid.real),
        boundary_im=float(-hbar * (rho_T - rho_0)),
        lambda_discrete=float(lambda_discrete(slices, X[0], X[-1])),
    )


@dataclass(frozen=True)
class ResidualStudy:
    N_list: tuple
    max_residual: tuple
    mean_residual: tuple
    order: float
    seed: int
    samples: int

    def rows(self):
        return [
            {"N": n, "max_residual": mx, "mean_residual": mn}
            for n, mx, mn in zip(self.N_list, self.max_residual, self.mean_residual)
        ]


def random_paths(grid: TimeGrid, dimension: int, samples: int, seed: int, low=-2.0, high=2.0):
    """Seeded broken lines with i.i.d. uniform vertices (endpoints included)."""
    rng = np.random.default_rng([int(seed), int(grid.N)])
    return [
        BrokenLine(grid, rng.uniform(low, high, size=(grid.N + 1, dimension)))
        for _ in range(samples)
    ]


def fit_order(N_list: Sequence[int], values: Sequence[float]) -> float:
    """Least-squares slope of -log(value) against log(N)."""
    if len(N_list) < 2:
        return float("nan")
    y = np.log(np.maximum(np.asarray(values, float), np.finfo(float).tiny))
    slope = np.polyfit(np.log(np.asarray(N_list, float)), y, 1)[0]
    return float(-slope)


def residual_convergence(
    result: EvolutionResult,
    params: PhysicalParams,
    potential: PotentialSchedule,
    N_list: Sequence[int],
    samples: int = 100,
    seed: int = 0,
    low: float = -2.0,
    high: float = 2.0,
    workers: int = 1,
) -> ResidualStudy:
    """Max/mean of |Lambda_re[x] - lambda_N| over seeded random broken lines.

    Each N draws its own paths from ``default_rng([seed, N])``, so results
    do not depend on the order or the subset of ``N_list``.
    """
    N_list = [int(n) for n in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise InputError("N_list must be strictly ascending")
    if samples < 10:
        raise InputError("samples must be >= 10")

    def one(N):
        ctx = DiscretizationContext(TimeGrid(result.T, N), params.hbar)
        slices = build_slices(result, ctx)
        res = []
        for path in random_paths(ctx.grid, result.dimension, samples, seed, low, high):
            dec = apply_action_operator(slices, path, potential, params)
            res.append(abs(dec.lambda_re - dec.lambda_discrete))
        return max(res), float(np.mean(res))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, N_list))
    else:
        out = [one(N) for N in N_list]
    mx = tuple(float(a) for a, _ in out)
    mn = tuple(float(b) for _, b in out)
    return ResidualStudy(tuple(N_list), mx, mn, fit_order(N_list, mx), int(seed), int(samples))


# --------------------------------------------------------------------------
# probabilities
# --------------------------------------------------------------------------

def _gaussian_support(sl: Slice):
    amp = sl.amplitude
    if amp.dimension != 1:
        raise InputError("probability quadratures are implemented for D = 1 only")
    if amp.degree() > 2 and any(t is not None and np.any(t) for t in (amp.c3, amp.c4)):
        raise InputError("probability quadratures need a quadratic log-amplitude")
    r1, r2 = float(amp.c1[0]), float(amp.c2[0, 0])
    if not r2 < 0:
        raise PreconditionError(f"slice at t = {sl.t:.6g} is not normalizable (rho2 = {r2:.6g})")
    mu = -r1 / r2
    sigma = math.sqrt(-1.0 / (2.0 * r2))
    return mu, sigma


def _log_density(sl: Slice, x):
    amp = sl.amplitude
    return 2.0 * (amp.c0 + amp.c1[0] * x + 0.5 * amp.c2[0, 0] * x * x)


def _check_delta(delta):
    delta = float(delta)
    if math.isnan(delta) or delta < 0:
        raise InputError(f"box half-width must be >= 0, got {delta}")
    return delta


def _interval(sl: Slice, center: float, delta: float, sigmas: float = SUPPORT_SIGMAS):
    mu, sigma = _gaussian_support(sl)
    lo, hi = mu - sigmas * sigma, mu + sigmas * sigma
    if math.isfinite(delta):
        lo, hi = max(lo, center - delta), min(hi, center + delta)
    return lo, hi


def _gl_rule(lo, hi, points):
    if hi <= lo:
        return np.zeros(0), np.zeros(0)
    x, w = np.polynomial.legendre.leggauss(points)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def box_integral(sl: Slice, center: float, delta: float, points: int = GL_POINTS) -> float:
    """Integral of exp(2 rho) over [center - delta, center + delta]."""
    delta = _check_delta(delta)
    if delta == 0:
        return 0.0
    x, w = _gl_rule(*_interval(sl, center, delta), points)
    return float(np.sum(w * np.exp(_log_density(sl, x))))


def slice_norms(slices: SliceSet, points: int = GL_POINTS) -> np.ndarray:
    """Per-node integrals of exp(2 rho_n) over the real line."""
    return np.array([box_integral(sl, 0.0, math.inf, points) for sl in slices.slices])


def _centers(slices: SliceSet, path) -> np.ndarray:
    if isinstance(path, BrokenLine):
        _check_path(slices, path)
        c = path.vertices[:, 0]
    else:
        c = np.broadcast_to(np.asarray(path, float), (slices.N + 1,))
    return np.asarray(c, float)


def path_probability(slices: SliceSet, path, deltas, normalize: bool = True) -> float:
    """Probability of moving inside per-node boxes [x_n - d_n, x_n + d_n].

    The integrand factorizes over nodes, so this is a product of 1-D
    Gauss-Legendre integrals (64 points on the box intersected with an
    8-sigma support). ``path`` is a ``BrokenLine`` or the box centers.
    """
    centers = _centers(slices, path)
    deltas = np.broadcast_to(np.asarray(deltas, float), (slices.N + 1,))
    prob = 1.0
    for sl, c, d in zip(slices.slices, centers, deltas):
        value = box_integral(sl, c, d)
        if normalize:
            value /= box_integral(sl, 0.0, math.inf)
        prob *= value
    return float(prob)


def dense_path_probability(slices: SliceSet, path, deltas, normalize: bool = True,
                           points: int | None = None) -> float:
    """Tensor-product quadrature of |Psi|^2 over all N + 1 axes at once.

    Does not use the factorization: the joint integrand is evaluated on the
    full tensor grid (in chunks). Points per axis default to 64, reduced to
    stay within a fixed evaluation budget for larger N.
    """
    n_axes = slices.N + 1
    if n_axes > DENSE_MAX_NODES:
        raise InputError(f"dense quadrature supports N <= {DENSE_MAX_NODES - 1}")
    if points is None:
        points = min(GL_POINTS, int(math.floor(DENSE_BUDGET ** (1.0 / n_axes) + 1e-9)))
    centers = _centers(slices, path)
    deltas = np.broadcast_to(np.asarray(deltas, float), (n_axes,))

    def integrate(boxes):
        rules = []
        for sl, (c, d) in zip(slices.slices, boxes):
            d = _check_delta(d)
            if d == 0:
                return 0.0
            rules.append(_gl_rule(*_interval(sl, c, d), points))
        if any(len(x) == 0 for x, _ in rules):
            return 0.0
        xs = [x for x, _ in rules]
        ws = [w for _, w in rules]
        # chunk over the first axis; the rest is evaluated on a full grid
        rest = np.meshgrid(*xs[1:], indexing="ij")
        wrest = np.ones(())
        for w in ws[1:]:
            wrest = np.multiply.outer(wrest, w)
        total = 0.0
        for x0, w0 in zip(xs[0], ws[0]):
            log_psi2 = _log_density(slices[0], x0)
            for n, grid_x in enumerate(rest, start=1):
                log_psi2 = log_psi2 + _log_density(slices[n], grid_x)
            total += w0 * float(np.sum(wrest * np.exp(log_psi2)))
        return total

    value = integrate(list(zip(centers, deltas)))
    if normalize:
        value /= integrate([(0.0, math.inf)] * n_axes)
    return float(value)


def endpoint_probability(slices: SliceSet, delta0: float, deltaT: float, x0=0.0, xT=0.0,
                         normalize: bool = True, verify: bool = True) -> float:
    """Probability of finding the particle near both endpoints.

    Interior vertices are integrated over the whole line. The result is the
    product of the endpoint box integrals (times interior norms when not
    normalized); with ``verify`` it is checked against the dense tensor
    quadrature of the joint integrand to 1e-6.
    """
    d0, dT = _check_delta(delta0), _check_delta(deltaT)
    first, last = slices[0], slices[-1]
    p0 = box_integral(first, float(np.ravel(x0)[0]), d0)
    pT = box_integral(last, float(np.ravel(xT)[0]), dT)
    if normalize:
        p0 /= box_integral(first, 0.0, math.inf)
        pT /= box_integral(last, 0.0, math.inf)
        value = p0 * pT
    else:
        interior = np.prod([box_integral(sl, 0.0, math.inf) for sl in slices.slices[1:-1]])
        value = p0 * pT * float(interior)
    if verify:
        centers = np.zeros(slices.N + 1)
        centers[0], centers[-1] = float(np.ravel(x0)[0]), float(np.ravel(xT)[0])
        deltas = np.full(slices.N + 1, math.inf)
        deltas[0], deltas[-1] = d0, dT
        dense = dense_path_probability(slices, centers, deltas, normalize)
        scale = max(1.0, abs(value)) if normalize else max(abs(value), np.finfo(float).tiny)
        if abs(dense - value) > FACTORIZATION_TOL * scale:
            raise ConsistencyError(
                f"endpoint factorization mismatch: factorized {value:.12g}, dense {dense:.12g}"
            )
    return float(value)
