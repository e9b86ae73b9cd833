"""Exception types raised across the package."""


class BranchlabError(Exception):
    """Base class for all package errors."""


class ReducibleMatrixError(BranchlabError, ValueError):
    def __init__(self, msg="reducible matrix"):
        super().__init__(msg)


class ConvergenceError(BranchlabError, RuntimeError):
    def __init__(self, msg="no convergence"):
        super().__init__(msg)


class NotCriticalError(BranchlabError, ValueError):
    def __init__(self, msg="not critical"):
        super().__init__(msg)


class MomentMismatchError(BranchlabError, ValueError):
    def __init__(self, msg="moment mismatch"):
        super().__init__(msg)


class ModelSpecError(BranchlabError, ValueError):
    """Malformed model specification; the message names the offending field."""


class SimulationOverflowError(BranchlabError, OverflowError):
    def __init__(self, step, coordinate):
        self.step = step
        self.coordinate = coordinate
        super().__init__(f"overflow at step {step}, coordinate {coordinate}")


class InsufficientStepsError(BranchlabError, ValueError):
    def __init__(self, msg="insufficient steps"):
        super().__init__(msg)


class DegenerateLawError(BranchlabError, ValueError):
    """The requested marginal is a point mass; ``point`` holds its location."""

    def __init__(self, point):
        self.point = float(point)
        super().__init__(f"degenerate: point mass at {self.point:g}")


class NotPSDError(BranchlabError, ValueError):
    def __init__(self, msg="not PSD"):
        super().__init__(msg)
