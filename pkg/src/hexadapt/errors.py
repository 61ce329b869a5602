"""Exception types raised across the package."""


class HexAdaptError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(HexAdaptError, ValueError):
    pass


class StaleReferenceError(HexAdaptError, KeyError):
    """A dead (refined away or coarsened) element or node was referenced."""

    def __str__(self):
        return str(self.args[0]) if self.args else "stale reference"


class DegenerateGeometryError(HexAdaptError, ArithmeticError):
    pass


class TopologyError(HexAdaptError):
    """Slave/master bookkeeping is inconsistent (e.g. cyclic dependency)."""


class CoarsenError(HexAdaptError):
    """Raised when a refinement record cannot be reverted yet."""


class SolverError(HexAdaptError, ArithmeticError):
    """Iterative linear solve did not converge.

    Attributes
    ----------
    residual : float
        Relative residual at the last iterate.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class ContactSolverError(SolverError):
    """Augmented-Lagrangian outer loop hit its iteration cap."""


class EstimatorError(HexAdaptError, ArithmeticError):
    pass


class ConfigError(HexAdaptError, ValueError):
    """Invalid scenario configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
