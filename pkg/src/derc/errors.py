"""Exception types shared across the package."""


class DercError(Exception):
    """Base class for package errors."""


class DomainError(DercError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class UsageError(DercError, ValueError):
    """Caller violated a shape or calling contract."""


class ConfigError(DercError, ValueError):
    """Invalid or unknown configuration value."""


class DataError(DercError, ValueError):
    """Label or corpus content that violates a data invariant."""


class ParseError(DataError):
    """Malformed corpus line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    """Missing or invalid field in a corpus or checkpoint record."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class MetricUndefinedError(DercError, ValueError):
    """Metric cannot be computed on the given input (e.g. a single class)."""


class DivergenceError(DercError, RuntimeError):
    """Training produced a non-finite loss."""
