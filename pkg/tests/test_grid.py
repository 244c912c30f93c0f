from __future__ import annotations

import math

import numpy as np
import pytest

from qap.dynamics import CoefficientState, evolve
from qap.errors import DomainError, InputError
from qap.grid import (
    GridState,
    auto_domain,
    compare_states,
    expectation,
    oracle_compare,
    propagate_grid,
    state_on_grid,
)
from qap.model import PhysicalParams, PolynomialField, PotentialSchedule, harmonic_field, linear_field

P = PhysicalParams()
FREE = PotentialSchedule.constant(PolynomialField.zero(1))
HO = PotentialSchedule.constant(harmonic_field(1.0))
GROUND = CoefficientState.make(rho2=-1.0)
X = PolynomialField.from_series(c1=[1.0])
X2 = PolynomialField.from_series(c2=[[2.0]])


def ground_grid(M=1024, half=8.0):
    return state_on_grid(GROUND, 1.0, -half, half, M)


def test_ground_state_is_an_eigenstate():
    psi0 = ground_grid()
    psi = propagate_grid(psi0, HO, P, 1.0, 4096)
    fid, phase = compare_states(psi0, psi)
    assert fid >= 1 - 1e-6
    assert phase == pytest.approx(-0.5, abs=1e-4)
    assert psi.t == 1.0


def test_norm_is_preserved():
    psi0 = state_on_grid(CoefficientState.make(s1=0.7, rho1=0.3, rho2=-1.0), 1.0, -10, 10, 1024)
    psi = propagate_grid(psi0, HO, P, 1.0, 4096)
    assert abs(psi.norm() / psi0.norm() - 1) < 1e-10


def test_free_spreading_matches_coefficient_flow():
    init = CoefficientState.make(rho2=-1.0)  # density variance 1/2
    flow = evolve(init, FREE, 1.0, P)
    lo, hi = auto_domain(flow)
    psi = propagate_grid(state_on_grid(init, 1.0, lo, hi, 4096), FREE, P, 1.0, 4096)
    predicted = -0.5 / flow.rho2[-1, 0, 0]
    assert predicted == pytest.approx(0.5 + 0.25 / 0.5, rel=1e-10)
    assert expectation(psi, X2) == pytest.approx(predicted, abs=1e-5)


def test_compare_states_examples():
    psi = ground_grid()
    assert compare_states(psi, psi) == pytest.approx((1.0, 0.0))
    rot = GridState(psi.xmin, psi.xmax, psi.M, np.exp(0.3j) * psi.values)
    fid, phase = compare_states(psi, rot)
    assert fid == pytest.approx(1.0) and phase == pytest.approx(0.3)
    odd = GridState(psi.xmin, psi.xmax, psi.M, psi.x * psi.values)
    assert compare_states(psi, odd)[0] == pytest.approx(0.0, abs=1e-12)


def test_compare_states_errors():
    psi = ground_grid()
    with pytest.raises(InputError):
        compare_states(psi, ground_grid(M=512))
    with pytest.raises(InputError):
        compare_states(psi, GridState(psi.xmin, psi.xmax, psi.M, np.zeros(psi.M)))


def test_expectation_examples():
    psi = ground_grid()
    assert expectation(psi, X) == pytest.approx(0.0, abs=1e-12)
    assert expectation(psi, X2) == pytest.approx(0.5, abs=1e-6)
    shifted = state_on_grid(CoefficientState.make(rho1=1.0, rho2=-1.0), 1.0, -8, 10, 1024)
    assert expectation(shifted, X) == pytest.approx(1.0, abs=1e-6)


def test_grid_state_invariants():
    with pytest.raises(InputError):
        GridState(0.0, 1.0, 128, np.zeros(128))
    with pytest.raises(InputError):
        GridState(1.0, 0.0, 256, np.zeros(256))


def test_domain_too_small_is_detected():
    narrow = ground_grid(half=6.5)
    with pytest.raises(DomainError):
        propagate_grid(narrow, PotentialSchedule.constant(linear_field(-8.0)), P, 1.0, 512)
    with pytest.raises(DomainError):
        propagate_grid(ground_grid(half=4.0), HO, P, 1.0, 16)


def test_time_stepping_is_second_order():
    init = CoefficientState.make(s1=0.8, rho1=0.5, rho2=-1.0)
    deficits = [1 - oracle_compare(init, HO, P, 1.0, M=1024, steps=n).fidelity for n in (32, 64)]
    assert deficits[0] / deficits[1] >= 3.0


@pytest.mark.parametrize("pot", [FREE, PotentialSchedule.constant(linear_field(0.7)), HO])
def test_oracle_matches_coefficient_flow(pot):
    init = CoefficientState.make(s1=-0.3, s2=0.5, rho1=0.2, rho2=-2.0)
    c = oracle_compare(init, pot, P, 1.0, M=2048)
    assert c.fidelity >= 1 - 1e-6
    assert c.phase_error < 1e-4
    assert c.norm_drift < 1e-10


def test_time_dependent_schedule_uses_both_segments():
    pot = PotentialSchedule(((0.0, harmonic_field(1.0)), (0.5, linear_field(1.0))))
    init = CoefficientState.make(rho2=-1.0)
    c = oracle_compare(init, pot, P, 1.0, M=2048)
    assert c.fidelity >= 1 - 1e-6
    assert c.phase_error < 1e-4
