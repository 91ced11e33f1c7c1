"""Exception hierarchy shared by every kbsa module."""


class KbsaError(Exception):
    """Base class for all errors raised by kbsa."""


class DomainError(KbsaError, ValueError):
    """An argument lies outside the domain of the operation (e.g. p not in [0, 1])."""


class DimensionMismatchError(KbsaError, ValueError):
    pass


class DegenerateWeightError(KbsaError):
    """The weight function vanishes (or is not finite) on the support of the inputs."""


class ZeroDenominatorError(KbsaError, ZeroDivisionError):
    """A normalising expectation estimated to zero."""


class DegenerateConditioningError(KbsaError):
    """The conditional CDF has no mass: the conditioning point cannot exhibit the behaviour."""


class RejectionStarvationError(KbsaError):
    pass


class ModelEvaluationError(KbsaError):
    def __init__(self, message, point=None):
        super().__init__(message if point is None else f"{message} (at x={list(point)})")
        self.point = point


class ExternalModelError(ModelEvaluationError):
    def __init__(self, message, request_id=None):
        super().__init__(message if request_id is None else f"{message} [request id {request_id}]")
        self.request_id = request_id


class ProtocolError(ExternalModelError):
    pass


class ModelTimeoutError(ExternalModelError):
    pass


class ModelExitError(ExternalModelError):
    pass


class ConfigError(KbsaError, ValueError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class NonFiniteValueError(KbsaError, ArithmeticError):
    """A kernel or functional evaluated to NaN or infinity."""
