"""Coefficient dynamics of exponential wave functions.

Per time slice the log wave function is ``chi(x, t) = (i/hbar) s(x, t) +
rho(x, t)`` with polynomial phase ``s`` (no constant term) and polynomial
log-amplitude ``rho``. Demanding that the x-dependent part of the
Schroedinger residual vanish order by order gives a closed ODE system for
the coefficients when the potential is at most quadratic:

    s1'   = -(1/m) s2.s1 + (hbar^2/m) rho2.rho1 - U1
    s2'   = -(1/m) s2.s2 + (hbar^2/m) rho2.rho2 - U2
    rho0' = -(1/m) s1.rho1 - (1/2m) tr s2
    rho1' = -(1/m) (s2.rho1 + rho2.s1)
    rho2' = -(1/m) (s2.rho2 + rho2.s2)

The x-independent real part is the function

    f = |s1|^2/2m - (hbar^2/2m) (|rho1|^2 + tr rho2) + U0,

the instantaneous rate of the dynamical phase. The action eigenvalue is

    lambda = s(x_T, T) - s(x_0, 0) - int_0^T f dt,

and the Hermiticity defect is int_0^T (1/m)(s1.rho1 + tr s2 / 2) dt, which
equals -(rho0(T) - rho0(0)).

Orders 3 and 4 are handled by a generic complex-tensor closure that drops
generated terms above the truncation order.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numba
import numpy as np
from scipy.integrate import simpson

from .errors import ConsistencyError, InputError, SingularityError
from .model import (
    PhysicalParams,
    PolynomialField,
    PotentialSchedule,
    as_point,
    eval_poly_jet,
    symmetrize,
)

BLOWUP_LIMIT = 1e12
DEFAULT_STEPS = 4096
DEFECT_IDENTITY_TOL = 1e-8
ERROR_CHECK_EVERY = 64


class TruncationWarning(UserWarning):
    """Closure of the coefficient hierarchy dropped nonzero higher orders."""


def _opt(a):
    if a is None:
        return None
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CoefficientState:
    """Phase and log-amplitude coefficients at one instant."""

    t: float
    s1: np.ndarray
    s2: np.ndarray
    rho0: float
    rho1: np.ndarray
    rho2: np.ndarray
    s3: Optional[np.ndarray] = None
    s4: Optional[np.ndarray] = None
    rho3: Optional[np.ndarray] = None
    rho4: Optional[np.ndarray] = None

    def __post_init__(self):
        s1 = np.atleast_1d(np.asarray(self.s1, dtype=float))
        d = s1.shape[0]
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "rho0", float(self.rho0))
        object.__setattr__(self, "s1", _opt(s1))
        object.__setattr__(self, "rho1", _opt(np.broadcast_to(np.asarray(self.rho1, float), (d,))))
        object.__setattr__(self, "s2", _opt(np.asarray(self.s2, float).reshape(d, d)))
        object.__setattr__(self, "rho2", _opt(np.asarray(self.rho2, float).reshape(d, d)))
        for name, order in (("s3", 3), ("rho3", 3), ("s4", 4), ("rho4", 4)):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _opt(np.asarray(value, float).reshape((d,) * order)))

    @classmethod
    def zero(cls, dimension: int = 1, order: int = 2) -> "CoefficientState":
        d = dimension
        extra = {}
        if order >= 3:
            extra.update(s3=np.zeros((d,) * 3), rho3=np.zeros((d,) * 3))
        if order >= 4:
            extra.update(s4=np.zeros((d,) * 4), rho4=np.zeros((d,) * 4))
        return cls(0.0, np.zeros(d), np.zeros((d, d)), 0.0, np.zeros(d), np.zeros((d, d)), **extra)

    @classmethod
    def make(cls, t=0.0, s1=0.0, s2=0.0, rho0=0.0, rho1=0.0, rho2=0.0, dimension=1, **higher):
        """Convenience constructor; scalar matrix arguments mean multiples of the identity."""
        d = dimension

        def mat(a):
            return a * np.eye(d) if np.ndim(a) == 0 else a

        return cls(
            t,
            np.broadcast_to(np.asarray(s1, float), (d,)),
            mat(s2),
            rho0,
            np.broadcast_to(np.asarray(rho1, float), (d,)),
            mat(rho2),
            **higher,
        )

    @property
    def dimension(self) -> int:
        return self.s1.shape[0]

    @property
    def order(self) -> int:
        if self.s4 is not None or self.rho4 is not None:
            return 4
        if self.s3 is not None or self.rho3 is not None:
            return 3
        return 2

    def phase_field(self) -> PolynomialField:
        """The phase polynomial s(x) (no constant term)."""
        return PolynomialField(0.0, self.s1, self.s2, self.s3, self.s4)

    def amplitude_field(self) -> PolynomialField:
        """The log-amplitude polynomial rho(x)."""
        return PolynomialField(self.rho0, self.rho1, self.rho2, self.rho3, self.rho4)

    def chi(self, x, hbar: float) -> complex:
        return complex(eval_poly_jet(self.amplitude_field(), x)[0], eval_poly_jet(self.phase_field(), x)[0] / hbar)

    def replace(self, **changes) -> "CoefficientState":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return CoefficientState(**values)

    def max_abs(self) -> float:
        parts = [self.s1, self.s2, self.rho1, self.rho2, np.array([self.rho0])]
        parts += [a for a in (self.s3, self.s4, self.rho3, self.rho4) if a is not None]
        return max(float(np.max(np.abs(a))) for a in parts)


# --------------------------------------------------------------------------
# generic complex-tensor closure (any order 2..4)
# --------------------------------------------------------------------------

def _complex_tensors(state: CoefficientState, hbar: float, order: int):
    d = state.dimension
    s = [None, state.s1, state.s2, state.s3, state.s4]
    r = [None, state.rho1, state.rho2, state.rho3, state.rho4]
    out = [complex(state.rho0, 0.0)]
    for k in range(1, order + 1):
        sk = s[k] if s[k] is not None else np.zeros((d,) * k)
        rk = r[k] if r[k] is not None else np.zeros((d,) * k)
        out.append(1j * sk / hbar + rk)
    return out


def _gradient_square(P, order):
    """Order-n coefficient tensors of grad(P).grad(P), plus the overflow flag."""
    grads = P[1:]  # G_a = P_{a+1}, a = 0 .. order-1
    q = {}
    overflow = False
    for a, b in itertools.product(range(order), repeat=2):
        n = a + b
        term = np.tensordot(grads[a], grads[b], axes=([0], [0]))
        if n > order:
            if np.any(np.abs(term) > 0):
                overflow = True
            continue
        coef = math.factorial(n) / (math.factorial(a) * math.factorial(b))
        q[n] = q.get(n, 0) + coef * term
    return [symmetrize(np.asarray(q.get(n, 0.0))) for n in range(order + 1)], overflow


def _laplacian(P, order):
    d = P[1].shape[0]
    out = []
    for n in range(order + 1):
        if n + 2 <= order:
            out.append(np.trace(P[n + 2], axis1=0, axis2=1))
        else:
            out.append(np.zeros((d,) * n, dtype=complex) if n else 0.0)
    return out


def _generic_rhs(state, U: PolynomialField, params: PhysicalParams, order: int):
    m, hbar = params.mass, params.hbar
    P = _complex_tensors(state, hbar, order)
    Q, overflow = _gradient_square(P, order)
    L = _laplacian(P, order)
    u = U.tensors()
    if U.degree() > order and any(u[k] is not None and np.any(u[k]) for k in range(order + 1, 5)):
        overflow = True
    dP = [None]
    for n in range(1, order + 1):
        un = u[n] if n < len(u) and u[n] is not None else 0.0
        dP.append(1j * hbar / (2 * m) * (L[n] + Q[n]) - 1j / hbar * un)
    drho0 = float(np.real(1j * hbar / (2 * m) * (L[0] + Q[0])))
    higher = {}
    for k in range(3, order + 1):
        higher[f"s{k}"] = symmetrize(hbar * np.imag(dP[k]))
        higher[f"rho{k}"] = symmetrize(np.real(dP[k]))
    deriv = CoefficientState(
        state.t,
        hbar * np.imag(dP[1]),
        symmetrize(hbar * np.imag(dP[2])),
        drho0,
        np.real(dP[1]),
        symmetrize(np.real(dP[2])),
        **higher,
    )
    return deriv, overflow


def rhs(state: CoefficientState, potential: PolynomialField, params: PhysicalParams,
        order: Optional[int] = None) -> CoefficientState:
    """Time derivative of the coefficient state under the potential field.

    Returned as a ``CoefficientState`` whose fields hold derivatives (``t``
    is copied). Potential orders above the truncation order are discarded
    with a ``TruncationWarning``.
    """
    order = state.order if order is None else order
    deriv, overflow = _generic_rhs(state, potential, params, order)
    if overflow:
        warnings.warn("coefficients above the truncation order were dropped", TruncationWarning, stacklevel=2)
    return deriv


def f_internal(state: CoefficientState, potential: PolynomialField, params: PhysicalParams) -> float:
    """Dynamical phase rate f = |s1|^2/2m - (hbar^2/2m)(|rho1|^2 + tr rho2) + U0."""
    m, hbar = params.mass, params.hbar
    return float(
        state.s1 @ state.s1 / (2 * m)
        - hbar**2 / (2 * m) * (state.rho1 @ state.rho1 + np.trace(state.rho2))
        + potential.c0
    )


# --------------------------------------------------------------------------
# compiled fixed-step RK4 for the quadratic closure
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _segment(seg_t, t):
    i = 0
    for j in range(seg_t.shape[0]):
        if seg_t[j] <= t:
            i = j
    return i


@numba.njit(cache=True)
def _quad_rhs(y, D, m, hbar, u1, u2, out):
    # layout: s1[D] s2[D*D] rho0 rho1[D] rho2[D*D]
    o_s2 = D
    o_r0 = D + D * D
    o_r1 = o_r0 + 1
    o_r2 = o_r1 + D
    h2 = hbar * hbar
    for i in range(D):
        acc = 0.0
        accr = 0.0
        for k in range(D):
            acc += -y[o_s2 + i * D + k] * y[k] + h2 * y[o_r2 + i * D + k] * y[o_r1 + k]
            accr += -(y[o_s2 + i * D + k] * y[o_r1 + k] + y[o_r2 + i * D + k] * y[k])
        out[i] = acc / m - u1[i]
        out[o_r1 + i] = accr / m
    for i in range(D):
        for j in range(i, D):
            a = 0.0
            b = 0.0
            for k in range(D):
                si = y[o_s2 + i * D + k]
                sj = y[o_s2 + j * D + k]
                ri = y[o_r2 + i * D + k]
                rj = y[o_r2 + j * D + k]
                a += -si * sj + h2 * ri * rj
                b += -(si * rj + ri * sj)
            out[o_s2 + i * D + j] = a / m - u2[i, j]
            out[o_s2 + j * D + i] = out[o_s2 + i * D + j]
            out[o_r2 + i * D + j] = b / m
            out[o_r2 + j * D + i] = b / m
    acc = 0.0
    for i in range(D):
        acc += -y[i] * y[o_r1 + i] - 0.5 * y[o_s2 + i * D + i]
    out[o_r0] = acc / m


@numba.njit(cache=True)
def _quad_f(y, D, m, hbar, u0):
    o_s2 = D
    o_r0 = D + D * D
    o_r1 = o_r0 + 1
    o_r2 = o_r1 + D
    kin = 0.0
    amp = 0.0
    for i in range(D):
        kin += y[i] * y[i]
        amp += y[o_r1 + i] * y[o_r1 + i] + y[o_r2 + i * D + i]
    return kin / (2.0 * m) - hbar * hbar / (2.0 * m) * amp + u0


@numba.njit(cache=True)
def _rk4_step(y, t, h, D, m, hbar, seg_t, U1, U2, k1, k2, k3, k4, tmp, out):
    n = y.shape[0]
    s = _segment(seg_t, t)
    _quad_rhs(y, D, m, hbar, U1[s], U2[s], k1)
    s = _segment(seg_t, t + 0.5 * h)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * h * k1[i]
    _quad_rhs(tmp, D, m, hbar, U1[s], U2[s], k2)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * h * k2[i]
    _quad_rhs(tmp, D, m, hbar, U1[s], U2[s], k3)
    s = _segment(seg_t, t + h)
    for i in range(n):
        tmp[i] = y[i] + h * k3[i]
    _quad_rhs(tmp, D, m, hbar, U1[s], U2[s], k4)
    for i in range(n):
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@numba.njit(cache=True)
def _rk4_quadratic(y0, D, m, hbar, T, steps, seg_t, U0, U1, U2, limit, check_every):
    n = y0.shape[0]
    h = T / steps
    ys = np.empty((steps + 1, n))
    fs = np.empty(steps + 1)
    ys[0] = y0
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    half = np.empty(n)
    full = np.empty(n)
    fs[0] = _quad_f(y0, D, m, hbar, U0[_segment(seg_t, 0.0)])
    max_err = 0.0
    for k in range(steps):
        t = k * h
        _rk4_step(ys[k], t, h, D, m, hbar, seg_t, U1, U2, k1, k2, k3, k4, tmp, ys[k + 1])
        if check_every > 0 and k % check_every == 0:
            _rk4_step(ys[k], t, 0.5 * h, D, m, hbar, seg_t, U1, U2, k1, k2, k3, k4, tmp, half)
            _rk4_step(half, t + 0.5 * h, 0.5 * h, D, m, hbar, seg_t, U1, U2, k1, k2, k3, k4, tmp, full)
            e = 0.0
            for i in range(n):
                d = abs(full[i] - ys[k + 1, i]) / 15.0
                if d > e:
                    e = d
            if e > max_err:
                max_err = e
        bad = False
        for i in range(n):
            v = ys[k + 1, i]
            if not (abs(v) <= limit):
                bad = True
        if bad:
            return ys, fs, k + 1, max_err
        tn = (k + 1) * h
        fs[k + 1] = _quad_f(ys[k + 1], D, m, hbar, U0[_segment(seg_t, tn)])
    return ys, fs, -1, max_err


def _pack_quadratic(state: CoefficientState) -> np.ndarray:
    return np.concatenate(
        [state.s1, state.s2.ravel(), [state.rho0], state.rho1, state.rho2.ravel()]
    )


def _schedule_arrays(potential: PotentialSchedule, D: int):
    seg_t = np.array([t for t, _ in potential.segments], dtype=float)
    U0 = np.array([f.c0 for _, f in potential.segments], dtype=float)
    U1 = np.array([f.c1 for _, f in potential.segments], dtype=float).reshape(-1, D)
    U2 = np.array([f.c2 for _, f in potential.segments], dtype=float).reshape(-1, D, D)
    return seg_t, U0, U1, U2


# --------------------------------------------------------------------------
# evolution results
# --------------------------------------------------------------------------

class EvolutionResult:
    """Coefficient trajectory on a uniform node grid plus derived scalars.

    Coefficients are stored as stacked arrays (``s1[n]`` is the value at
    ``times[n]``); ``states`` materializes ``CoefficientState`` objects.
    """

    def __init__(self, times, s1, s2, rho0, rho1, rho2, f_samples, params, potential,
                 higher=None, steps=0, max_local_error=0.0, warnings_=()):
        self.times = np.asarray(times)
        self.s1 = np.asarray(s1)
        self.s2 = np.asarray(s2)
        self.rho0 = np.asarray(rho0)
        self.rho1 = np.asarray(rho1)
        self.rho2 = np.asarray(rho2)
        self.higher = dict(higher or {})
        self.f_samples = np.asarray(f_samples)
        self.params = params
        self.potential = potential
        self.integrator_stats = (int(steps), float(max_local_error))
        self.warnings = list(warnings_)
        self.lambda_ = float("nan")
        self.hermiticity_defect = float("nan")
        self.defect_identity_residual = float("nan")
        for arr in (self.times, self.s1, self.s2, self.rho0, self.rho1, self.rho2, self.f_samples):
            arr.setflags(write=False)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dimension(self) -> int:
        return self.s1.shape[1]

    def state_at(self, n: int) -> CoefficientState:
        extra = {k: v[n] for k, v in self.higher.items()}
        return CoefficientState(self.times[n], self.s1[n], self.s2[n], self.rho0[n],
                                self.rho1[n], self.rho2[n], **extra)

    @cached_property
    def states(self) -> tuple:
        return tuple(self.state_at(n) for n in range(len(self.times)))

    def integral_f(self) -> float:
        """Composite Simpson integral of the f samples over [0, T]."""
        return float(simpson(self.f_samples, x=self.times))

    @property
    def initial(self) -> CoefficientState:
        return self.state_at(0)

    @property
    def final(self) -> CoefficientState:
        return self.state_at(len(self.times) - 1)


def evolve(
    initial: CoefficientState,
    potential: PotentialSchedule,
    T: float,
    params: PhysicalParams,
    steps: int = DEFAULT_STEPS,
    x0=None,
    xT=None,
) -> EvolutionResult:
    """Integrate the coefficient system over [0, T] with fixed-step RK4.

    ``lambda_`` on the result is evaluated for the endpoints ``x0``, ``xT``
    (default: the origin); call ``action_eigenvalue`` for other endpoints.

    Raises
    ------
    SingularityError
        If any coefficient exceeds 1e12 in magnitude (Riccati blow-up,
        i.e. a caustic of the phase flow). ``err.t`` is the detection time.
    """
    if steps < 8:
        raise InputError("steps must be >= 8")
    if initial.t != 0.0:
        raise InputError("initial state must be at t = 0")
    if not T > 0:
        raise InputError("T must be positive")
    D = initial.dimension
    if potential.dimension != D:
        raise InputError("potential and state dimensions differ")
    order = initial.order
    notes = []
    if potential.degree() > order:
        notes.append(f"potential degree {potential.degree()} above truncation order {order}; higher terms dropped")
        warnings.warn(notes[-1], TruncationWarning, stacklevel=2)
        potential = potential.truncated(order)

    if order == 2:
        result = _evolve_quadratic(initial, potential, T, params, steps, notes)
    else:
        result = _evolve_generic(initial, potential, T, params, steps, order, notes)

    D = result.dimension
    x0 = np.zeros(D) if x0 is None else as_point(x0, D)
    xT = np.zeros(D) if xT is None else as_point(xT, D)
    result.lambda_ = action_eigenvalue(result, x0, xT)
    result.hermiticity_defect = hermiticity_defect(result, params, check=False)
    result.defect_identity_residual = abs(
        result.hermiticity_defect + (result.rho0[-1] - result.rho0[0])
    )
    return result


def _evolve_quadratic(initial, potential, T, params, steps, notes):
    D = initial.dimension
    seg_t, U0, U1, U2 = _schedule_arrays(potential, D)
    y0 = _pack_quadratic(initial)
    ys, fs, bad, max_err = _rk4_quadratic(
        y0, D, float(params.mass), float(params.hbar), float(T), int(steps),
        seg_t, U0, U1, U2, BLOWUP_LIMIT, ERROR_CHECK_EVERY,
    )
    h = T / steps
    if bad >= 0:
        raise SingularityError(bad * h)
    o = D + D * D
    times = np.linspace(0.0, T, steps + 1)
    return EvolutionResult(
        times,
        ys[:, :D],
        ys[:, D:o].reshape(-1, D, D),
        ys[:, o],
        ys[:, o + 1:o + 1 + D],
        ys[:, o + 1 + D:].reshape(-1, D, D),
        fs,
        params,
        potential,
        steps=steps,
        max_local_error=max_err,
        warnings_=notes,
    )


_FIELDS = ("s1", "s2", "rho0", "rho1", "rho2", "s3", "s4", "rho3", "rho4")


def _axpy(state, deriv, h):
    values = {"t": state.t}
    for name in _FIELDS:
        a = getattr(state, name)
        b = getattr(deriv, name)
        values[name] = None if a is None else a + h * b
    return CoefficientState(**values)


def _evolve_generic(initial, potential, T, params, steps, order, notes):
    h = T / steps
    times = np.linspace(0.0, T, steps + 1)
    overflow_count = 0

    def F(state, t):
        nonlocal overflow_count
        d, over = _generic_rhs(state, potential.lookup(t), params, order)
        overflow_count += int(over)
        return d

    states = [initial]
    y = initial
    max_err = float("nan")  # no step-doubling estimate on this path
    for k in range(steps):
        t = k * h
        k1 = F(y, t)
        k2 = F(_axpy(y, k1, h / 2), t + h / 2)
        k3 = F(_axpy(y, k2, h / 2), t + h / 2)
        k4 = F(_axpy(y, k3, h), t + h)
        values = {"t": times[k + 1]}
        for name in _FIELDS:
            a = getattr(y, name)
            if a is None:
                values[name] = None
            else:
                values[name] = a + h / 6 * (getattr(k1, name) + 2 * getattr(k2, name)
                                            + 2 * getattr(k3, name) + getattr(k4, name))
        y = CoefficientState(**values)
        if not (y.max_abs() <= BLOWUP_LIMIT):
            raise SingularityError(times[k + 1])
        states.append(y)
    notes.append(f"truncated closure at order {order}: {overflow_count} rhs evaluations dropped higher-order terms")
    warnings.warn(notes[-1], TruncationWarning, stacklevel=3)
    fs = [f_internal(s, potential.lookup(s.t), params) for s in states]
    higher = {}
    for name in ("s3", "s4", "rho3", "rho4"):
        if getattr(initial, name) is not None:
            higher[name] = np.array([getattr(s, name) for s in states])
    return EvolutionResult(
        times,
        np.array([s.s1 for s in states]),
        np.array([s.s2 for s in states]),
        np.array([s.rho0 for s in states]),
        np.array([s.rho1 for s in states]),
        np.array([s.rho2 for s in states]),
        fs,
        params,
        potential,
        higher=higher,
        steps=steps,
        max_local_error=max_err,
        warnings_=notes,
    )


def action_eigenvalue(result: EvolutionResult, x0, xT) -> float:
    """lambda = s(x_T, T) - s(x_0, 0) - int_0^T f dt (Simpson over the nodes)."""
    D = result.dimension
    x0 = as_point(x0, D)
    xT = as_point(xT, D)
    s_T = eval_poly_jet(result.final.phase_field(), xT)[0]
    s_0 = eval_poly_jet(result.initial.phase_field(), x0)[0]
    return s_T - s_0 - result.integral_f()


def hermiticity_defect(result: EvolutionResult, params: PhysicalParams, check: bool = True) -> float:
    """Integral of (1/m)(s1.rho1 + tr(s2)/2) over [0, T].

    Zero is the Hermiticity condition. With ``check`` the identity
    ``defect = -(rho0(T) - rho0(0))`` is enforced to 1e-8.
    """
    integrand = (
        np.einsum("ni,ni->n", result.s1, result.rho1)
        + 0.5 * np.trace(result.s2, axis1=1, axis2=2)
    ) / params.mass
    defect = float(simpson(integrand, x=result.times))
    if check:
        gap = abs(defect + (result.rho0[-1] - result.rho0[0]))
        if gap >= DEFECT_IDENTITY_TOL:
            raise ConsistencyError(
                f"defect identity violated by {gap:.3e}; increase the number of steps"
            )
    return defect
