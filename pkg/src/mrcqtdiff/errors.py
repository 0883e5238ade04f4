"""Exception hierarchy shared by all modules."""


class MRCQTError(Exception):
    """Base class for package errors."""


class ParameterError(MRCQTError, ValueError):
    """An argument or configuration value is out of its valid range."""


class SizeError(MRCQTError, ValueError):
    """Array lengths or shapes are incompatible."""


class ConstructionError(MRCQTError):
    """A filter bank could not be built with the requested properties."""


class ConfigError(MRCQTError, ValueError):
    """A run configuration is malformed or names an unknown key."""


class NumericalError(MRCQTError, ArithmeticError):
    """A non-finite value or failed decomposition was detected."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class FormatError(MRCQTError, ValueError):
    """A file is truncated or uses an unsupported encoding."""


class GradcheckError(MRCQTError, AssertionError):
    """Analytic and numerical gradients disagree beyond tolerance."""


class DataError(MRCQTError, ValueError):
    """A dataset is empty or holds no usable segment."""
