"""Exception types shared across the package."""


class RestadError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RestadError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(RestadError):
    """A configuration value is out of its legal range or inconsistent."""


class ContractError(RestadError):
    """An operation precondition was violated."""


class DegenerateInitError(RestadError):
    """Initialization cannot proceed (for example, zero mean squared
    distance to the nearest cluster center)."""


class UndefinedMetricError(RestadError):
    """A ranking metric was requested on labels with a single class."""


class DataFormatError(RestadError):
    """A data file could not be parsed; the message names the file and line."""


class TrainingError(RestadError):
    """Training aborted (for example, non-finite loss)."""
