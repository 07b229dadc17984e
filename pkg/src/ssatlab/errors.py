"""Exception hierarchy shared by every ssatlab module."""


class SSATError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SSATError, ValueError):
    """Invalid configuration: bad shapes, bad hyperparameters, unknown presets."""


class UsageError(SSATError, RuntimeError):
    """API used out of order or with incompatible arguments."""


class NumericError(SSATError, ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class FormatError(SSATError, ValueError):
    """A binary or text file does not follow its declared format."""

    def __init__(self, message, offset=None, path=None):
        super().__init__(message)
        self.offset = offset
        self.path = path


class ParseError(ConfigurationError):
    """Config file problem, reported with the offending line."""

    def __init__(self, message, line=None, key=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key
