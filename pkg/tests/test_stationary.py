from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import qap.stationary as stationary
from qap.dynamics import CoefficientState
from qap.errors import AmbiguityError, BracketError, CausticError, InputError, NonConvergenceError, StepSizeError
from qap.model import PhysicalParams, PolynomialField, PotentialSchedule, harmonic_field, linear_field, symmetrize
from qap.stationary import (
    Scenario,
    block_indices,
    classical_action_reference,
    classical_limit_sweep,
    discrete_action_extremum,
    fd_gradient,
    find_stationary,
    lambda_of_initial,
    pack,
    predict_endpoint,
    probe_grid_crosscheck,
    probe_sensitivity,
    unpack,
    vector_length,
)

P = PhysicalParams()
FREE = PotentialSchedule.constant(PolynomialField.zero(1))
HO = PotentialSchedule.constant(harmonic_field(1.0))
ONE = PolynomialField(1.0, [0.0], [[0.0]])
X = PolynomialField.from_series(c1=[1.0])


# --- coefficient vector ---------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), D=st.integers(1, 3))
def test_pack_round_trip(seed, D):
    rng = np.random.default_rng(seed)
    state = CoefficientState(0.0, rng.normal(size=D), symmetrize(rng.normal(size=(D, D))), 0.0,
                             rng.normal(size=D), symmetrize(rng.normal(size=(D, D))))
    c = pack(state)
    assert c.shape == (2 * D + D * (D + 1),) == (vector_length(D),)
    back = unpack(c, D)
    for name in ("s1", "s2", "rho1", "rho2"):
        assert np.array_equal(getattr(back, name), getattr(state, name))
    assert np.array_equal(pack(back), c)


def test_unpack_rejects_wrong_length():
    with pytest.raises(InputError):
        unpack(np.zeros(5), 1)


# --- objective ---------------------------------------------------------------------

def test_lambda_of_initial_examples():
    assert lambda_of_initial([1, 0, 0, 0], 0, 1, 1, FREE, P) == pytest.approx(0.5, abs=1e-13)
    assert lambda_of_initial([0, 0, 0, 0], 0, 1, 1, FREE, P) == 0.0


@pytest.mark.parametrize("p", [-1.5, 0.0, 0.3, 1.0, 2.2])
def test_lambda_is_quadratic_in_momentum(p):
    assert lambda_of_initial([p, 0, 0, 0], 0, 1, 1, FREE, P) == pytest.approx(p - p * p / 2, abs=1e-12)


# --- stationary search -----------------------------------------------------------------

def test_free_particle_stationary_point():
    r = find_stationary(0, 1, 1, FREE, P, guesses=[np.zeros(4)])
    assert r.converged and r.grad_norm < 1e-7
    assert r.lambda0 == pytest.approx(0.5, rel=1e-8)
    assert np.allclose(r.c_star, [1, 0, 0, 0], atol=1e-6)
    assert find_stationary(0, 2, 1, FREE, P).lambda0 == pytest.approx(2.0, rel=1e-8)


def test_certificate_on_the_certified_block():
    r = find_stationary(0.2, 1.4, 0.8, HO, P)
    search, certify = block_indices(1, "phase")
    fun = lambda c: lambda_of_initial(c, 0.2, 1.4, 0.8, HO, P)
    g = fd_gradient(fun, r.c_star, certify)
    assert np.all(np.abs(g) < 1e-6 * max(1.0, abs(r.lambda0)))


def test_amplitude_direction_is_not_stationary():
    # d lambda / d rho2 at rho = 0 equals hbar^2 T / 2m for the free particle:
    # the trace term of f leaves no stationary point over the full vector.
    r = find_stationary(0, 1, 1, FREE, P)
    for hbar, T in ((1.0, 1.0), (0.5, 2.0)):
        p = P.with_hbar(hbar)
        fun = lambda c: lambda_of_initial(c, 0, 1, T, FREE, p)
        g = fd_gradient(fun, [1 / T, 0, 0, 0], np.array([3]))
        assert g[0] == pytest.approx(hbar**2 * T / 2, rel=1e-6)


def test_full_block_reports_non_convergence():
    with pytest.raises(NonConvergenceError) as err:
        find_stationary(0, 1, 1, FREE, P, guesses=[np.array([1.0, 0, 0, -1.0])], block="full", max_iter=5)
    assert err.value.best_grad_norm > 1e-7
    assert err.value.attempts


def test_warm_start_is_a_fixed_point():
    r = find_stationary(0.1, 0.9, 1.0, HO, P)
    again = find_stationary(0.1, 0.9, 1.0, HO, P, guesses=[r.c_star])
    assert again.iterations <= 2
    assert np.allclose(again.c_star, r.c_star, atol=1e-10)


def test_caustic_guess_is_abandoned_and_logged():
    bad = pack(CoefficientState.make(s2=-50.0))
    r = find_stationary(0, 1, 1, FREE, P, guesses=[bad, np.zeros(4)])
    assert r.converged and r.multistart_index == 1
    assert "caustic" in r.attempts[0][1]


def test_requires_a_guess():
    with pytest.raises(InputError):
        find_stationary(0, 1, 1, FREE, P, guesses=[])


def test_multistart_is_deterministic_with_threads():
    a = find_stationary(0, 1, 1, HO, P)
    b = find_stationary(0, 1, 1, HO, P, workers=3)
    assert a == b


@pytest.mark.parametrize("seed", range(5))
def test_free_particle_exactness(seed):
    rng = np.random.default_rng(seed)
    x0, xT, T = rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.3, 3)
    r = find_stationary(x0, xT, T, FREE, P)
    assert r.lambda0 == pytest.approx((xT - x0) ** 2 / (2 * T), rel=1e-8, abs=1e-12)


def test_free_particle_two_dimensions():
    pot = PotentialSchedule.constant(PolynomialField.zero(2))
    r = find_stationary([0, 0], [1, 2], 1.0, pot, PhysicalParams(dimension=2))
    assert r.lambda0 == pytest.approx(2.5, rel=1e-8)


def test_endpoint_derivative_symmetry():
    lam = stationary._Lambda0(1.0, FREE, P, 4096, "phase")
    for x0, xT in ((0.0, 1.0), (0.4, -0.3)):
        assert lam.d_xT(x0, xT) == pytest.approx(-lam.d_x0(x0, xT), abs=1e-6)


# --- classical references --------------------------------------------------------------

def test_classical_reference_examples():
    assert classical_action_reference("free", 1.0, 0, 1, 1) == 0.5
    assert classical_action_reference("harmonic", 1.0, 0, 1, 1) == pytest.approx(0.32110, abs=1e-4)
    assert classical_action_reference("harmonic", 1.0, 0, 1, 1) == pytest.approx(
        math.cos(1) / (2 * math.sin(1)), rel=1e-14)
    with pytest.raises(CausticError):
        classical_action_reference("harmonic", 1.0, 0, 1, math.pi)


@pytest.mark.parametrize("kind,field,kw", [
    ("free", PolynomialField.zero(1), {}),
    ("linear", linear_field(0.7), {"alpha": 0.7}),
    ("harmonic", harmonic_field(1.3, 0.8), {"omega": 1.3}),
])
def test_closed_forms_match_brute_force_extremization(kind, field, kw):
    m, x0, xT, T = (0.8 if kind == "harmonic" else 1.0), 0.3, -0.9, 1.1
    ref = classical_action_reference(kind, m, x0, xT, T, **kw)
    assert discrete_action_extremum(field, m, x0, xT, T, N=4000) == pytest.approx(ref, abs=1e-6)


@pytest.mark.parametrize("kind,kw", [("linear", {"alpha": 0.7}), ("harmonic", {"omega": 1.3})])
def test_stationary_value_reproduces_classical_action(kind, kw):
    sc = Scenario(kind, 1.0, **kw)
    r = find_stationary(0.3, -0.9, 1.1, sc.potential(), sc.params())
    assert r.lambda0 == pytest.approx(sc.reference(0.3, -0.9, 1.1), abs=1e-9)


# --- classical-limit sweep ------------------------------------------------------------

def test_sweep_free_particle_is_exact():
    rows = classical_limit_sweep([1.0, 0.25, 0.0625], Scenario("free"), 0, 1, 1)
    assert all(r.converged and r.rel_error < 1e-10 for r in rows)


def test_sweep_edge_cases():
    assert classical_limit_sweep([], Scenario("harmonic"), 0, 1, 1) == []
    with pytest.raises(InputError):
        classical_limit_sweep([0.5, 1.0], Scenario("harmonic"), 0, 1, 1)


def test_sweep_reports_non_convergence():
    rows = classical_limit_sweep([1.0], Scenario("free"), 0, 1, 1, block="full", steps=256)
    assert not rows[0].converged
    assert rows[0].rel_error > 0.5


def test_full_block_roots_at_diverging_coefficients_are_rejected():
    r = find_stationary(0, 1, 1, FREE, P, block="full", steps=256, strict=False)
    assert not r.converged
    assert np.max(np.abs(r.c_star)) > 50
    assert any("unresolved" in note for _, note, _ in r.attempts)


# --- endpoint prediction -------------------------------------------------------------------

def test_predict_endpoint_free_particle():
    pred = predict_endpoint(0.0, 1.0, 1.0, FREE, P, (-3.0, 3.3))
    assert pred.xT == pytest.approx(1.0, abs=1e-6)
    assert pred.pT == pytest.approx(1.0, abs=1e-6)


def test_predict_endpoint_at_rest():
    assert predict_endpoint(0.45, 0.0, 1.0, FREE, P, (-3.0, 3.3)).xT == pytest.approx(0.45, abs=1e-6)


@pytest.mark.parametrize("x0,p0,T", [(-0.7, 0.4, 1.5), (1.2, -2.0, 0.6)])
def test_predict_endpoint_inverts_free_flow(x0, p0, T):
    pred = predict_endpoint(x0, p0, T, FREE, P, (-4.0, 4.1))
    assert pred.xT == pytest.approx(x0 + p0 * T, abs=1e-6)
    assert pred.pT == pytest.approx(p0, abs=1e-6)


def test_predict_endpoint_bracket_errors(monkeypatch):
    with pytest.raises(BracketError):
        predict_endpoint(0.0, 1.0, 1.0, FREE, P, (2.0, 3.0))
    monkeypatch.setattr(stationary._Lambda0, "d_x0", lambda self, x0, xT, h=1e-3: math.sin(3 * xT))
    with pytest.raises(AmbiguityError) as err:
        predict_endpoint(0.0, 0.0, 1.0, FREE, P, (-2.9, 3.1))
    assert len(err.value.intervals) == 5


# --- probe response -----------------------------------------------------------------------

def test_probe_zero_and_constant():
    zero = PolynomialField.zero(1)
    assert probe_sensitivity(zero, 1e-2, 0, 1, 1, FREE, P, mode="at_fixed_c") == 0.0
    for pot in (FREE, HO):
        d = probe_sensitivity(ONE, 1e-2, 0, 1, 1, pot, P, mode="at_fixed_c")
        assert d == pytest.approx(-1.0, abs=1e-10)
    d = probe_sensitivity(ONE, 1e-2, 0, 1, 2.5, FREE, P, mode="at_stationary")
    assert d == pytest.approx(-2.5, abs=1e-10)


def test_probe_linear_at_stationarity():
    d = probe_sensitivity(X, 1e-2, 0, 1, 1, FREE, P, mode="at_stationary")
    assert d == pytest.approx(-0.5, abs=1e-4)
    r = find_stationary(0, 1, 1, FREE, P)
    assert probe_grid_crosscheck(X, r, 0.0, 1.0, FREE, P) == pytest.approx(d, abs=1e-3)


def test_probe_richardson_failure_is_reported():
    quad = PolynomialField.from_series(c2=[[1.0]])
    with pytest.raises(StepSizeError):
        probe_sensitivity(quad, 0.5, 0, 1, 1, FREE, P, mode="at_fixed_c")


def test_probe_mode_validation():
    with pytest.raises(InputError):
        probe_sensitivity(X, 1e-2, 0, 1, 1, FREE, P, mode="sideways")
