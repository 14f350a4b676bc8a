"""Exception types raised by the steering toolkit."""


class SteeringError(Exception):
    pass


class DimensionError(SteeringError, ValueError):
    """Matrices or fields with inconsistent shapes (structural, not a well-posedness failure)."""


class InvalidProblemError(SteeringError, ValueError):
    """A problem failed validate_problem; the report is attached."""

    def __init__(self, report):
        self.report = report
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        super().__init__(f"problem is not well posed: {failed}")


class GridMismatchError(SteeringError, ValueError):
    pass


class SymmetryError(SteeringError, ValueError):
    pass


class ConfigError(SteeringError, ValueError):
    pass


class RiccatiEscapeError(SteeringError, ArithmeticError):
    """Finite-time escape of a Riccati flow."""

    def __init__(self, time: float, which: str = "Pi"):
        self.time = float(time)
        self.which = which
        super().__init__(f"{which} diverged near t={self.time:.6g}")


class RiccatiConvergenceError(SteeringError, ArithmeticError):
    def __init__(self, residual: float, iterations: int):
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(
            f"coupled Riccati shooting did not converge after {iterations} "
            f"iterations (residual {self.residual:.3e})"
        )


class SingularCovarianceError(SteeringError, ArithmeticError):
    def __init__(self, index: int, eigenvalue: float):
        self.index = int(index)
        self.eigenvalue = float(eigenvalue)
        super().__init__(
            f"covariance at index {index} is singular "
            f"(min eigenvalue {self.eigenvalue:.3e})"
        )


class CFLError(SteeringError, ValueError):
    pass


class DiffusionRankError(SteeringError, ValueError):
    pass


class PositivityError(SteeringError, ArithmeticError):
    """A factor field fell to the positivity floor."""

    def __init__(self, index: int, message: str = ""):
        self.index = int(index)
        super().__init__(message or f"factor hit the positivity floor at time index {index}")


class PropagationError(SteeringError, ArithmeticError):
    def __init__(self, index: int):
        self.index = int(index)
        super().__init__(f"non-finite values after step {index}")
