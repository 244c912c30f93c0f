"""Exception hierarchy shared by the qap modules.

Numerical failures (caustics, non-convergence, domain overflow) derive from
``NumericalError`` so that the command line front end can map them onto a
single exit code.
"""

from __future__ import annotations


class QAPError(Exception):
    """Base class for all errors raised by this package."""


class InputError(QAPError, ValueError):
    """An argument has the wrong shape, sign or range."""


class ValidationError(InputError):
    """A model or configuration violates one or more invariants.

    ``issues`` holds ``(code, message)`` pairs, one per violated invariant.
    """

    def __init__(self, issues):
        self.issues = list(issues)
        text = "; ".join(f"{code}: {msg}" for code, msg in self.issues)
        super().__init__(text or "invalid model")

    @property
    def codes(self):
        return [code for code, _ in self.issues]


class NumericalError(QAPError, ArithmeticError):
    """A computation could not be completed reliably."""


class SingularityError(NumericalError):
    """Coefficient blow-up (a Riccati singularity / caustic) during evolution."""

    def __init__(self, t, message=None):
        self.t = float(t)
        super().__init__(message or f"coefficient blow-up near t = {self.t:.6g}")


class CausticError(NumericalError):
    """A classical reference action is undefined (sin(omega T) = 0)."""


class NonConvergenceError(NumericalError):
    """No stationary point was found from any starting guess."""

    def __init__(self, message, best_grad_norm=float("inf"), attempts=()):
        self.best_grad_norm = float(best_grad_norm)
        self.attempts = list(attempts)
        super().__init__(message)


class BracketError(NumericalError):
    """The search bracket of a scalar root problem holds no sign change."""


class AmbiguityError(NumericalError):
    """A scalar root problem has several roots inside the bracket."""

    def __init__(self, message, intervals=()):
        self.intervals = [tuple(iv) for iv in intervals]
        super().__init__(message)


class EvaluationError(NumericalError):
    """Finite-difference evaluation failed (underflow / overflow of the product)."""


class PreconditionError(NumericalError):
    """A slice is not normalizable, so a probability is undefined."""


class DomainError(NumericalError):
    """Grid propagation reached the boundary of the spatial domain."""


class StepSizeError(NumericalError):
    """Richardson check on a finite-difference derivative failed."""


class ConsistencyError(NumericalError):
    """An internal identity that should hold to tolerance was violated."""
