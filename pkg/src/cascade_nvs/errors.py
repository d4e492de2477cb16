class CascadeNVSError(Exception):
    """Base class for all package errors."""


class ConfigError(CascadeNVSError, ValueError):
    """Invalid configuration or violated precondition."""


class GeometryError(CascadeNVSError, ValueError):
    """Degenerate geometric input (nonpositive depth, singular plane, ...)."""


class ParseError(CascadeNVSError):
    """Malformed input file. Carries the file path and byte offset."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        self.message = message
        super().__init__(f"{self.path}: byte {self.offset}: {message}")


class DivergenceError(CascadeNVSError, RuntimeError):
    """Non-finite loss or gradient during optimization."""
