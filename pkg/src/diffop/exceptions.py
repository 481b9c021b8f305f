"""Exception types raised across the package."""


class DiffOPError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DiffOPError, ValueError):
    pass


class SingularMatrix(DiffOPError, ArithmeticError):
    pass


class RankDeficient(SingularMatrix):
    pass


class NonFiniteEvaluation(DiffOPError, ArithmeticError):
    pass


class DomainError(DiffOPError, ValueError):
    pass


class OutOfSupport(DiffOPError, ValueError):
    pass


class ActiveConstraintsPresent(DiffOPError):
    pass


class MaxIterationsExceeded(DiffOPError):
    pass


class NonConvexDetected(DiffOPError):
    pass


class SolverFailure(DiffOPError):
    """An inner planning solve failed; carries rollout coordinates when known."""

    def __init__(self, message, k=None, n=None, t=None):
        super().__init__(message)
        self.k, self.n, self.t = k, n, t

    def __str__(self):
        base = super().__str__()
        if self.k is None and self.n is None and self.t is None:
            return base
        return f"{base} (k={self.k}, n={self.n}, t={self.t})"


class NoValidTrajectories(DiffOPError):
    pass


class ConfigError(DiffOPError, ValueError):
    pass
