"""Exception types raised across the package."""


class SlateForgeError(Exception):
    """Base class for package errors."""


class ConfigurationError(SlateForgeError, ValueError):
    """Inconsistent or unsupported configuration (dimensions, estimators, ...)."""


class ParseError(SlateForgeError, ValueError):
    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ValidationError(SlateForgeError, ValueError):
    """Data that parsed correctly but violates an invariant."""


class InstanceTooLargeError(SlateForgeError, ValueError):
    """Refusal to enumerate an instance that is too large."""


class UnsupportedDistributionError(SlateForgeError, TypeError):
    """Noise distribution lacks a differentiable log-density."""


class TrainingDivergedError(SlateForgeError, FloatingPointError):
    """Non-finite gradient or parameter encountered during training."""
