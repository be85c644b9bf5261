"""Exception hierarchy shared by all tailtree modules."""


class TailTreeError(Exception):
    """Base class for every error raised by the package."""


# tree construction / lookup
class TreeError(TailTreeError, ValueError):
    pass


class CycleOrDisconnected(TreeError):
    pass


class SelfLoop(TreeError):
    pass


class DuplicateEdge(TreeError):
    pass


class NodeOutOfRange(TreeError):
    pass


class NotIdentifiable(TailTreeError):
    """Raised when the edge parameters cannot be recovered from the observed nodes."""

    def __init__(self, message, violators=()):
        super().__init__(message)
        self.violators = tuple(violators)


# numerical kernels
class NotPositiveDefinite(TailTreeError, ValueError):
    pass


class DimensionMismatch(TailTreeError, ValueError):
    pass


class AllZeroInput(TailTreeError, ValueError):
    pass


class NonPositiveInput(TailTreeError, ValueError):
    pass


class BracketFailure(TailTreeError, RuntimeError):
    pass


# estimation
class EstimationError(TailTreeError):
    pass


class EmptyExceedanceSet(EstimationError):
    pass


class TooFewRows(EstimationError):
    pass


class DegenerateColumn(EstimationError, ValueError):
    pass


class SolverFailure(EstimationError):
    pass


class OptimizerDivergence(EstimationError):
    pass


class RankDeficientPairs(EstimationError):
    pass


class SingularJacobian(EstimationError):
    pass


class ResampleEstimationFailure(EstimationError):
    def __init__(self, message, failures=0):
        super().__init__(message)
        self.failures = failures


# pipeline
class RankDeficientDesign(TailTreeError, ValueError):
    pass


class UnparseableTimestamp(TailTreeError, ValueError):
    pass
