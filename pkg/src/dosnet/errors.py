"""Exception types shared across the package."""


class DosError(Exception):
    """Base class for all package errors."""


class ConfigError(DosError, ValueError):
    pass


class ShapeError(DosError, ValueError):
    pass


class NumericError(DosError, FloatingPointError):
    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class InvalidCovarianceError(DosError, ValueError):
    pass


class ParseError(DosError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DosError, ValueError):
    pass


class MissingArtifactError(DosError, FileNotFoundError):
    pass


class SkipAgent(DosError):
    """Raised when an agent cannot be used (invalid anchor, empty history)."""
