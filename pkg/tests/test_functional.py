from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qap.dynamics import CoefficientState, action_eigenvalue, evolve
from qap.errors import EvaluationError, InputError, PreconditionError
from qap.functional import (
    BrokenLine,
    apply_action_operator,
    build_slices,
    dense_path_probability,
    endpoint_probability,
    fit_order,
    lambda_discrete,
    path_probability,
    random_paths,
    residual_convergence,
)
from qap.model import DiscretizationContext, PhysicalParams, PolynomialField, PotentialSchedule, TimeGrid, harmonic_field, linear_field

P = PhysicalParams()
FREE = PotentialSchedule.constant(PolynomialField.zero(1))
HO = PotentialSchedule.constant(harmonic_field(1.0))
GROUND = CoefficientState.make(rho2=-1.0)
ERF1 = math.erf(1.0)


def slices_for(state, pot, N, T=1.0, steps=4096, params=P):
    steps = N * math.ceil(steps / N)
    r = evolve(state, pot, T, params, steps=steps)
    return build_slices(r, DiscretizationContext(TimeGrid(T, N), params.hbar)), r


@pytest.fixture(scope="module")
def ground8():
    return slices_for(GROUND, HO, 8)[0]


# --- slices --------------------------------------------------------------------

def test_ground_state_slices_are_identical(ground8):
    x = np.array([0.7])
    for sl in ground8.slices:
        v, g, lap = sl.chi_jet(x, 1.0)
        assert v == pytest.approx(-0.245, abs=1e-14)
        assert lap == pytest.approx(-1.0, abs=1e-14)


def test_plane_wave_slices():
    sl, _ = slices_for(CoefficientState.make(s1=1.0), FREE, 4)
    for s in sl.slices:
        assert s.chi_jet([2.0], 1.0)[0] == pytest.approx(2j)


def test_zero_state_slices():
    sl, _ = slices_for(CoefficientState.zero(1), FREE, 4)
    assert all(s.chi_jet([1.3], 1.0)[0] == 0 for s in sl.slices)


def test_slices_reproduce_flow_at_nodes():
    st_ = CoefficientState.make(s1=0.3, s2=0.2, rho1=0.4, rho2=-0.8)
    sl, r = slices_for(st_, HO, 16)
    for n in range(17):
        x = np.array([0.37])
        assert sl[n].chi_jet(x, 1.0)[0] == r.state_at(n * 256).chi(x, 1.0)


def test_incompatible_grid_is_rejected():
    r = evolve(GROUND, HO, 1.0, P, steps=100)
    with pytest.raises(InputError):
        build_slices(r, DiscretizationContext(TimeGrid(1.0, 8), 1.0))
    with pytest.raises(InputError):
        build_slices(r, DiscretizationContext(TimeGrid(2.0, 10), 1.0))


# --- action operator --------------------------------------------------------------

def test_zero_functional_gives_zero():
    sl, _ = slices_for(CoefficientState.zero(1), FREE, 8)
    path = BrokenLine(sl.context.grid, np.linspace(-1, 3, 9))
    d = apply_action_operator(sl, path, FREE, P)
    assert d.value == 0


def _random_case(seed):
    rng = np.random.default_rng(seed)
    st_ = CoefficientState.make(s1=rng.uniform(-1, 1), s2=rng.uniform(-0.5, 0.5),
                                rho1=rng.uniform(-1, 1), rho2=-rng.uniform(0.3, 1.5))
    pot = PotentialSchedule.constant(PolynomialField(rng.uniform(-1, 1), [rng.uniform(-1, 1)],
                                                     [[rng.uniform(0, 2)]]))
    sl, _ = slices_for(st_, pot, 8, steps=1024)
    path = BrokenLine(sl.context.grid, rng.uniform(-2, 2, 9))
    return sl, path, pot


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_analytic_and_finite_difference_modes_agree(seed):
    sl, path, pot = _random_case(seed)
    a = apply_action_operator(sl, path, pot, P, mode="analytic")
    b = apply_action_operator(sl, path, pot, P, mode="finite_difference")
    assert abs(a.value - b.value) <= 1e-6 * abs(a.value)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_decomposition_identity(seed):
    sl, path, pot = _random_case(seed)
    d = apply_action_operator(sl, path, pot, P)
    assert abs(d.lambda_re - (d.lambda_discrete + d.residual_re)) < 1e-12 * max(1.0, abs(d.lambda_re))


def test_imaginary_part_is_reported_not_folded(ground8):
    path = BrokenLine(ground8.context.grid, np.linspace(0.0, 1.0, 9))
    d = apply_action_operator(ground8, path, HO, P)
    assert d.lambda_im != 0.0
    assert d.boundary_im == pytest.approx(-(-0.5) * 1.0)


def test_finite_difference_underflow_is_reported():
    sl, _ = slices_for(CoefficientState.make(rho2=-40.0), PotentialSchedule.constant(harmonic_field(40.0)), 8,
                       steps=8192)
    path = BrokenLine(sl.context.grid, np.full(9, 5.0))
    with pytest.raises(EvaluationError):
        apply_action_operator(sl, path, FREE, P, mode="finite_difference")
    apply_action_operator(sl, path, FREE, P, mode="analytic")


def test_unknown_mode(ground8):
    path = BrokenLine(ground8.context.grid, np.zeros(9))
    with pytest.raises(InputError):
        apply_action_operator(ground8, path, HO, P, mode="spectral")


def test_path_length_checked():
    with pytest.raises(InputError):
        BrokenLine(TimeGrid(1.0, 8), np.zeros(8))


# --- lambda_N --------------------------------------------------------------------

@pytest.mark.parametrize("N", [1, 4, 16, 64])
def test_lambda_discrete_constant_f_is_exact(N):
    plane, _ = slices_for(CoefficientState.make(s1=1.0), FREE, N)
    assert lambda_discrete(plane, 0.0, 1.0) == pytest.approx(0.5, abs=1e-14)
    ground, _ = slices_for(GROUND, HO, N)
    assert lambda_discrete(ground, 0.0, 0.0) == pytest.approx(-0.5, abs=1e-14)


def test_lambda_discrete_riemann_error_is_first_order():
    st_ = CoefficientState.make(s2=1.0, rho2=-1.0)
    fine, r = slices_for(st_, FREE, 4096)
    ref = lambda_discrete(fine, 0.0, 1.0)
    errs = [abs(lambda_discrete(slices_for(st_, FREE, N)[0], 0.0, 1.0) - ref) for N in (16, 32)]
    assert 1.6 < errs[0] / errs[1] < 2.4
    assert abs(ref - action_eigenvalue(r, 0.0, 1.0)) < 1e-3


# --- residual convergence ----------------------------------------------------------

def test_random_paths_are_seeded_per_N():
    g = TimeGrid(1.0, 8)
    a = random_paths(g, 1, 5, seed=3)
    b = random_paths(g, 1, 5, seed=3)
    c = random_paths(g, 1, 5, seed=4)
    assert all(np.array_equal(p.vertices, q.vertices) for p, q in zip(a, b))
    assert not np.array_equal(a[0].vertices, c[0].vertices)


def test_fit_order_recovers_power_law():
    Ns = [8, 16, 32, 64]
    assert fit_order(Ns, [3.0 / n**1.5 for n in Ns]) == pytest.approx(1.5)


def test_coherent_state_residual_converges_first_order():
    st_ = CoefficientState.make(s1=0.5, rho1=1.0, rho2=-1.0)
    r = evolve(st_, HO, 1.0, P)
    study = residual_convergence(r, P, HO, [8, 16, 32, 64], samples=100, seed=1)
    assert all(b < a for a, b in zip(study.max_residual, study.max_residual[1:]))
    assert study.order >= 0.8


def test_constant_path_residual_vanishes_with_N():
    st_ = CoefficientState.make(s1=0.5, rho1=1.0, rho2=-1.0)
    r = evolve(st_, HO, 1.0, P)
    res = []
    for N in (8, 16, 32, 64):
        sl = build_slices(r, DiscretizationContext(TimeGrid(1.0, N), 1.0))
        d = apply_action_operator(sl, BrokenLine(sl.context.grid, np.full(N + 1, 0.4)), HO, P)
        res.append(abs(d.residual_re))
    assert all(b < a for a, b in zip(res, res[1:]))
    assert res[-1] < 0.05


def test_residual_study_is_deterministic_and_thread_independent():
    r = evolve(CoefficientState.make(s1=0.5, rho1=1.0, rho2=-1.0), HO, 1.0, P)
    a = residual_convergence(r, P, HO, [8, 16], samples=20, seed=9)
    b = residual_convergence(r, P, HO, [8, 16], samples=20, seed=9, workers=2)
    assert a == b
    assert [row["N"] for row in a.rows()] == [8, 16]


def test_residual_study_preconditions():
    r = evolve(GROUND, HO, 1.0, P)
    with pytest.raises(InputError):
        residual_convergence(r, P, HO, [16, 8], samples=20)
    with pytest.raises(InputError):
        residual_convergence(r, P, HO, [8, 16], samples=5)


# --- probabilities -------------------------------------------------------------------

@pytest.fixture(scope="module")
def ground2():
    return slices_for(GROUND, HO, 2)[0]


def test_path_probability_examples(ground2):
    assert path_probability(ground2, 0.0, math.inf) == pytest.approx(1.0, abs=1e-12)
    assert path_probability(ground2, 0.0, 1.0) == pytest.approx(ERF1**3, abs=1e-10)
    assert path_probability(ground2, 0.0, [1.0, 0.0, 1.0]) == 0.0


def test_path_probability_errors(ground2):
    with pytest.raises(InputError):
        path_probability(ground2, 0.0, -0.5)
    plane, _ = slices_for(CoefficientState.make(s1=1.0), FREE, 2)
    with pytest.raises(PreconditionError):
        path_probability(plane, 0.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(d=st.lists(st.floats(0.0, 4.0), min_size=3, max_size=3),
       grow=st.floats(0.0, 2.0), k=st.integers(0, 2),
       c=st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_path_probability_monotone_and_bounded(ground2, d, grow, k, c):
    p = path_probability(ground2, c, d)
    bigger = list(d)
    bigger[k] += grow
    q = path_probability(ground2, c, bigger)
    assert 0.0 <= p <= q + 1e-15
    assert q <= 1.0 + 1e-12


def test_dense_quadrature_matches_factorized_form(ground2):
    c = [0.3, -0.2, 0.5]
    d = [0.8, 1.1, 0.6]
    assert dense_path_probability(ground2, c, d) == pytest.approx(path_probability(ground2, c, d), abs=1e-10)


def test_dense_quadrature_guard_rail():
    sl, _ = slices_for(GROUND, HO, 8)
    with pytest.raises(InputError):
        dense_path_probability(sl, 0.0, 1.0)


def test_endpoint_probability_examples():
    sl, _ = slices_for(GROUND, HO, 3)
    assert endpoint_probability(sl, 1.0, 1.0) == pytest.approx(ERF1**2, abs=1e-6)
    assert endpoint_probability(sl, math.inf, math.inf) == pytest.approx(1.0, abs=1e-12)


def test_endpoint_probability_on_a_moving_packet():
    st_ = CoefficientState.make(s1=0.8, rho1=0.5, rho2=-1.0)
    sl, _ = slices_for(st_, HO, 3, T=1.0)
    p = endpoint_probability(sl, 0.7, 0.9, x0=0.2, xT=0.6)
    assert 0.0 < p < 1.0
