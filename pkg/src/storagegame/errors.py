"""Exception types raised across the package."""


class StorageGameError(Exception):
    """Base class for all package errors."""


class FeederParseError(StorageGameError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TopologyError(StorageGameError, ValueError):
    pass


class ValidationError(StorageGameError, ValueError):
    pass


class TraceParseError(StorageGameError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DivergenceError(StorageGameError, RuntimeError):
    """The AC sweep did not reach its tolerance within the iteration cap."""


class AssumptionError(StorageGameError, ValueError):
    """A storage unit violates the slow-charging assumption s_max - s_min > b_max - b_min."""


class DegenerateEnvelopeError(StorageGameError, ValueError):
    pass


class SoCViolationError(StorageGameError, RuntimeError):
    def __init__(self, message, period=None, users=()):
        self.period = period
        self.users = tuple(users)
        if period is not None:
            message = f"period {period}: {message}"
        super().__init__(message)


class InfeasibleStepError(StorageGameError, RuntimeError):
    def __init__(self, message, period=None):
        self.period = period
        if period is not None:
            message = f"period {period}: {message}"
        super().__init__(message)


class NotConvergedError(StorageGameError, RuntimeError):
    """Raised by the distributed solver; carries the partial decision and trace."""

    def __init__(self, message, decision=None, trace=None):
        self.decision = decision
        self.trace = trace
        super().__init__(message)
