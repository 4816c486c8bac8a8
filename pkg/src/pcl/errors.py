class PCLError(Exception):
    """Base class for errors raised by this package."""


class InvalidSpecError(PCLError, ValueError):
    pass


class DegenerateEmbeddingError(PCLError, ArithmeticError):
    """Raised when a pre-normalization output is too close to zero to normalize."""


class NumericError(PCLError, ArithmeticError):
    pass


class ConfigError(PCLError, ValueError):
    """Invalid run configuration; ``lineno`` points into the config file when known."""

    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None and lineno is not None:
            where = f"{path}:{lineno}: "
        elif lineno is not None:
            where = f"line {lineno}: "
        super().__init__(where + message)
