"""Numerical laboratory for the quantum action principle.

Evolves the polynomial coefficients of exponential wave functions, computes
action-operator eigenvalues, checks the time-sliced wave-functional
correspondence with the Schroedinger equation against an independent grid
solver, and stationarizes the eigenvalue over initial data.
"""

from .model import (
    DiscretizationContext,
    PhysicalParams,
    PolynomialField,
    PotentialSchedule,
    TimeGrid,
    eval_poly_jet,
    validate_model,
)
from .dynamics import (
    CoefficientState,
    EvolutionResult,
    action_eigenvalue,
    evolve,
    f_internal,
    hermiticity_defect,
    rhs,
)

__version__ = "0.1.0"
