"""Exception and warning types raised by xmodal."""


class XModalError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(XModalError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(XModalError, ValueError):
    """Input data is malformed (non-finite entries, wrong shape, ...)."""


class ParseError(XModalError, ValueError):
    """A file could not be parsed.

    ``line`` is 1-based; ``position`` is the 1-based token index on that line
    when the failure is lexical.
    """

    def __init__(self, message, line=None, position=None):
        self.line = line
        self.position = position
        where = []
        if line is not None:
            where.append(f"line {line}")
        if position is not None:
            where.append(f"token {position}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class TrainingError(XModalError, RuntimeError):
    """Raised when an optimisation step produces non-finite gradients."""


class EvaluationError(XModalError, RuntimeError):
    """Raised when retrieval metrics cannot be computed at all."""


class ConvergenceWarning(UserWarning):
    """Sinkhorn iterations stopped before reaching the requested tolerance."""
