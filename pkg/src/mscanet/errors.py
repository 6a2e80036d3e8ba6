"""Exception hierarchy shared by all mscanet modules."""


class MscanetError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MscanetError):
    """Bad shapes, widths, kernel sizes or other structural mistakes."""


class InputError(MscanetError):
    """Runtime data that violates an operation's preconditions."""


class TapeError(MscanetError):
    """Gradient tape misuse (backward twice, non-scalar loss, ...)."""


class NumericsError(MscanetError):
    """Non-finite values detected by a debug check."""


class GenerationError(MscanetError):
    """Synthetic scene cannot be built from the requested spec."""


class ParseError(MscanetError):
    """Malformed annotation or binary file content."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:" + (f"{line}: " if line is not None else " ")
        super().__init__(loc + message)
        self.path = path
        self.line = line


class CheckpointError(MscanetError):
    """Checkpoint magic/version/config does not match expectations."""


class MetricError(MscanetError):
    """Metric undefined for the given inputs (e.g. all-zero reference)."""


class NumericalAbort(MscanetError):
    """Training hit a non-finite loss; carries the offending batch id."""

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id
