"""Exception and warning classes raised across the package."""


class EWLimitError(Exception):
    """Base class for all package errors."""


# noise generation
class ClippedMassExceeded(EWLimitError):
    pass


class GridTooSmall(EWLimitError):
    pass


class GridMismatch(EWLimitError, ValueError):
    pass


# solver
class NonFinite(EWLimitError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StationarityNotReached(UserWarning):
    pass


class StabilityWarning(UserWarning):
    pass


# test functions
class SupportNotCovered(EWLimitError, ValueError):
    pass


class Unresolvable(EWLimitError, ValueError):
    pass


# quadrature
class QuadratureNotConverged(EWLimitError):
    pass


class DomainError(EWLimitError, ValueError):
    pass


class NotPositiveSemidefinite(EWLimitError, ValueError):
    pass


# diagrams
class DiagramError(EWLimitError, ValueError):
    pass


class EmptySubgraph(DiagramError):
    pass


class NotTight(DiagramError):
    pass


class NotPartition(DiagramError):
    pass


class EnumerationBudgetExceeded(DiagramError):
    pass


class ReductionNotApplicable(DiagramError):
    pass


class DiagramSyntaxError(DiagramError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# statistics
class TooFewReplicas(EWLimitError, ValueError):
    pass


class NonPositiveCovariance(UserWarning):
    pass


class PairMismatch(EWLimitError, ValueError):
    pass


# configuration
class ConfigError(EWLimitError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
