"""Exception hierarchy shared by every module."""


class SinkhornCLTError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SinkhornCLTError):
    """A measure or matrix file could not be parsed."""


class InvalidMeasure(SinkhornCLTError):
    """Weights or atoms violate the probability-measure invariants."""


class DimensionMismatch(SinkhornCLTError):
    """Inputs live in incompatible dimensions or have incompatible shapes."""


class NumericalError(SinkhornCLTError):
    """Base class for failures of a numerical routine (CLI exit code 2)."""


class NoConvergence(NumericalError):
    def __init__(self, residual: float, iterations: int, tol: float):
        self.residual = residual
        self.iterations = iterations
        self.tol = tol
        super().__init__(
            f"Sinkhorn did not converge: residual {residual:.3e} > tol {tol:.1e} "
            f"after {iterations} iterations"
        )


class SingularSystem(NumericalError):
    """The deflated Fredholm matrix is numerically singular."""


class NonSymmetric(NumericalError):
    """A matrix expected to be symmetrizable is too far from symmetric."""


class NotCentered(SinkhornCLTError):
    """A right-hand side handed to a resolvent has nonzero weighted mean."""


class NotSelfTransport(SinkhornCLTError):
    """A self-transport quantity was requested for P != Q."""


class EmptySample(SinkhornCLTError):
    """An empty sample was passed where at least one value is required."""
