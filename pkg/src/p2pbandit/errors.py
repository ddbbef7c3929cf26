class ConfigurationError(ValueError):
    """Invalid run configuration or protocol parameters."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProtocolError(RuntimeError):
    """Internal inconsistency inside a sharing protocol."""


class InstrumentationError(RuntimeError):
    """A check needs instrumentation that was not recorded."""
