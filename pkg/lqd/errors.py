from typing import Optional

__all__ = (
    "LQDException",
    "DimensionMismatch",
    "InvalidDelay",
    "InvalidSelector",
    "NonFiniteValue",
    "InvalidTableau",
    "SingularStageSystem",
    "InvalidStepCount",
    "NotSymmetric",
    "ImproperTransferFunction",
    "InfeasibleConstraints",
    "QPNotConverged",
    "SingularInnovation",
    "InvalidScenario",
    "ClosedLoopFailure",
    "PayloadError",
)


class LQDException(Exception):
    """Base exception class for lqd.py"""

    pass


class DimensionMismatch(LQDException):
    """An exception that is thrown when matrix shapes do not agree with each other"""

    pass


class InvalidDelay(LQDException):
    """An exception that is thrown when a time delay is negative or nonfinite, or the sample time is not positive"""

    pass


class InvalidSelector(LQDException):
    """An exception that is thrown when a selector block index falls outside of the stacked input"""

    pass


class NonFiniteValue(LQDException):
    """An exception that is thrown when an input or an intermediate result contains NaN or Inf"""

    pass


class InvalidTableau(LQDException):
    """An exception that is thrown when a Butcher tableau is malformed, or an unknown tableau name is requested"""

    pass


class SingularStageSystem(LQDException):
    """An exception that is thrown when the linear stage relations of an implicit tableau cannot be solved. Usually the step is too large."""

    pass


class InvalidStepCount(LQDException):
    """An exception that is thrown when the number of integration steps (or doublings) is out of range"""

    pass


class NotSymmetric(LQDException):
    """An exception that is thrown when a covariance matrix is not symmetric"""

    pass


class ImproperTransferFunction(LQDException):
    """An exception that is thrown when a transfer function has a numerator of higher degree than its denominator, or a zero leading denominator coefficient"""

    pass


class InfeasibleConstraints(LQDException):
    """An exception that is thrown when input box or rate-of-movement bounds describe an empty set"""

    pass


class QPNotConverged(LQDException):
    """An exception that is thrown when the active-set QP solver hits its iteration cap or ends with a KKT residual above tolerance"""

    pass


class SingularInnovation(LQDException):
    """An exception that is thrown when the Kalman filter innovation covariance is singular"""

    pass


class InvalidScenario(LQDException):
    """An exception that is thrown when a closed-loop scenario has event times outside of the simulation, or inconsistent sizes"""

    pass


class ClosedLoopFailure(LQDException):
    """An exception that is thrown when the controller fails inside a closed-loop simulation. The failing step index is kept in :attr:`step`."""

    def __init__(self, message: str, *, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class PayloadError(LQDException):
    """An exception that is thrown when a JSON document (system, problem, scenario) cannot be parsed or is missing fields"""

    def __init__(self, message: str, *, path: Optional[str] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = path if line is None else f"{path}:{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
