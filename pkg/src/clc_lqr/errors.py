"""Exception types raised across the package."""


class CLCError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CLCError, ValueError):
    pass


class DegenerateCostError(CLCError, ZeroDivisionError):
    pass


class CapacityError(CLCError):
    def __init__(self, size, budget):
        super().__init__(f"candidate space has {size} trajectories, budget is {budget}")
        self.size = size
        self.budget = budget


class OutOfRangeError(CLCError, ValueError):
    pass


class NoFixedPointError(CLCError):
    def __init__(self, residual, threshold, solution=None):
        super().__init__(
            f"best coupled-equation residual {residual:.6g} exceeds threshold {threshold:.6g}"
        )
        self.residual = residual
        self.threshold = threshold
        self.solution = solution


class DivergenceError(CLCError):
    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite


class ProbeError(CLCError):
    """An evaluator failed on a finite-difference probe."""

    def __init__(self, probe, beta, cause):
        super().__init__(f"evaluator failed on probe {probe} at beta={list(beta)}: {cause}")
        self.probe = probe
        self.beta = beta


class ConfigError(CLCError, ValueError):
    pass
