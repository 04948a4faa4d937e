"""Exception types raised across the simulator."""


class SimError(Exception):
    """Base class for every error raised by ergosim."""


class ConfigError(SimError, ValueError):
    pass


class StaleEvent(SimError):
    pass


class UnknownDeparture(SimError, KeyError):
    pass


class DuplicateID(SimError):
    pass


class FloorViolation(SimError):
    pass


class EmptySystem(SimError):
    pass


class ZeroElapsed(SimError):
    pass


class Uninitialized(SimError):
    pass


class BadEstimate(SimError, ValueError):
    pass


class TooSmall(SimError):
    pass


class InsufficientEpochs(SimError):
    pass


class InsufficientData(SimError):
    pass


class ZeroRate(SimError):
    pass


class TraceError(SimError):
    pass


class ParseError(TraceError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OrderError(TraceError):
    pass


class InvariantViolation(SimError):
    def __init__(self, message, time=None, state=None):
        super().__init__(message)
        self.time = time
        self.state = state or {}
