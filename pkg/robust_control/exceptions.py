"""Custom exceptions for the robust control toolkit."""


class RobustControlError(Exception):
    """Base exception for estimation, prediction and planning errors."""
    pass


class StructureError(RobustControlError):
    """Raised when matrix, state or control dimensions are inconsistent."""
    pass


class ConfigurationError(RobustControlError):
    """Raised when configuration is invalid."""
    pass


class NumericalError(RobustControlError):
    """Raised when a factorization that should succeed fails."""
    pass


class CapacityError(RobustControlError):
    """Raised when a vertex enumeration would exceed the configured dimension."""
    pass


class SolverError(RobustControlError):
    """Raised when the LP solver fails without a feasibility verdict."""
    pass


class IntervalOrderError(RobustControlError):
    """Raised when a predictor step produces lower > upper."""
    pass


class RewardContractError(RobustControlError):
    """Raised when an environment emits a reward outside [0, 1]."""
    pass


class BudgetExhausted(RobustControlError):
    """Raised when the planning tree has reached its node capacity."""
    pass


class SimulationError(RobustControlError):
    """Raised when a model simulation fails during a tree expansion."""

    def __init__(self, message, path=()):
        super().__init__(f"{message} (node path: {list(path)})")
        self.path = tuple(path)


class EpisodeError(RobustControlError):
    """Raised when an episode aborts."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step
