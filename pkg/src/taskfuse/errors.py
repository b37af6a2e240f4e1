"""Exception types shared across the simulation stack."""


class SimError(Exception):
    """Base class for every error raised by the simulator."""


class UsageError(SimError):
    """An API was called in a state or context it does not support."""


class ValidationError(SimError):
    """A configuration value is out of its legal range."""


class CapacityError(SimError):
    """A hard resource limit (streams, executors) would be exceeded."""


class DeadlockError(SimError):
    """The run drained with tasks still suspended; message lists them."""


class OrderingViolationError(SimError):
    """Members of an aggregation team diverged in their operation sequence."""

    def __init__(self, region: str, sequence: int, expected, got):
        self.region = region
        self.sequence = sequence
        self.expected = expected
        self.got = got
        super().__init__(
            f"aggregation ordering violation in region {region!r} at sequence "
            f"{sequence}: expected {expected}, got {got}"
        )


class CalibrationError(SimError):
    """Timing anchors cannot be met with the given profile."""


class ParseError(SimError):
    """A profile or cost file is malformed; message carries the line number."""

    def __init__(self, path: str, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")
