"""Exception types raised by the toolkit."""


class ControlError(Exception):
    """Base class for all errors raised by this package."""


class EigenSolveError(ControlError):
    """Eigenproblem failed (residual too large or degenerate spectrum)."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class PropagationError(ControlError):
    """Propagation aborted (non-finite values or invalid step)."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class TrajectoryMismatch(ControlError):
    """A reference trajectory does not match the control it is used with."""


class NoDescentDirection(ControlError):
    """The Lyapunov derivative series is numerically zero."""

    def __init__(self, message, max_coefficient=0.0):
        super().__init__(message)
        self.max_coefficient = max_coefficient


class NotInE(ControlError):
    """A state has a vanishing product of diagonal overlaps."""


class StagnationError(ControlError):
    """The Lyapunov loop made no progress for too many iterations."""

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class ResonantLadder(ControlError):
    """Two index pairs of the frequency ladder share the same frequency."""

    def __init__(self, message, collisions=()):
        super().__init__(message)
        self.collisions = list(collisions)


class IllConditioned(ControlError):
    """A Gram system is too ill conditioned to be trusted."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class MinimalityFailure(ControlError):
    """A family of time signals is numerically linearly dependent."""

    def __init__(self, message, smallest_singular_value=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class NewtonDivergence(ControlError):
    """A Newton iteration failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrustRegionShrunk(ControlError):
    """Damped Newton could not find a decreasing step."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class VerificationFailure(ControlError):
    """A synthesized control failed its closed-loop check."""

    def __init__(self, message, error=None):
        super().__init__(message)
        self.error = error


class RankDeficiency(ControlError):
    """A Gram-Schmidt family lost rank."""


class NotFound(ControlError):
    """A search ended without a feasible point."""

    def __init__(self, message, best_margin=None):
        super().__init__(message)
        self.best_margin = best_margin


class ScenarioError(ControlError):
    """A scenario description is invalid."""


class BudgetExceeded(ControlError):
    """A time or iteration budget was exhausted."""
