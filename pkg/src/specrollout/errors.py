"""Exception hierarchy shared by all specrollout modules."""


class SpecRolloutError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SpecRolloutError):
    """Invalid configuration: bad parameters, missing scenario pieces."""


class TraceFormatError(SpecRolloutError):
    """Malformed or invalid trace file.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InsufficientDataError(SpecRolloutError):
    """Not enough (or rank-deficient) samples for a fit."""


class MissingEntryError(SpecRolloutError):
    """A cost-model lookup had no entry for the requested key."""


class InfeasiblePlanError(SpecRolloutError):
    """Plan search found no configuration with positive throughput."""
