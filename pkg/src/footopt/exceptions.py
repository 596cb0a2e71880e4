"""Exception hierarchy shared by all footopt modules."""


class FootoptError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(FootoptError, ValueError):
    """Input failed a structural check (shape, finiteness, ordering)."""


class DomainError(FootoptError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(ValidationError):
    """Array dimensions do not match what the model expects."""


class ReachabilityError(FootoptError, ValueError):
    """Target point lies outside the leg workspace."""

    def __init__(self, message, closest_distance):
        super().__init__(message)
        self.closest_distance = closest_distance


class InfeasibleError(FootoptError, RuntimeError):
    """A constrained search space turned out to be empty."""


class PolicyError(FootoptError, ValueError):
    """Foot specification inconsistent with the motion bounds."""


class SamplerStarvationError(InfeasibleError):
    """Rejection sampler acceptance rate fell below the floor."""


class OracleError(FootoptError, ValueError):
    """Trajectory cannot be driven through the synthetic force oracle."""


class TrainingError(FootoptError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch

