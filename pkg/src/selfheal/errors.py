"""Exception hierarchy shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`NumericError`
to exit code 3.
"""


class SelfHealError(Exception):
    """Base class for all package errors."""


class ConfigError(SelfHealError, ValueError):
    """Invalid user input: models, windows, configuration files."""


class InvalidModelError(ConfigError):
    pass


class InvalidWindowError(ConfigError):
    pass


class UnsupportedModelError(ConfigError):
    """Raised by closed-form theory for models it does not cover (complex hoppings)."""


class NumericError(SelfHealError, ArithmeticError):
    """A computation failed or left its domain of validity."""


class OnContourError(NumericError):
    pass


class DegenerateSpectrumError(NumericError):
    def __init__(self, message, cond_estimate=float("nan")):
        super().__init__(message)
        self.cond_estimate = cond_estimate


class IllConditionedError(NumericError):
    def __init__(self, message, cond_estimate=float("nan")):
        super().__init__(message)
        self.cond_estimate = cond_estimate


class DeadStateError(NumericError):
    pass


class NonConvergentModeError(NumericError):
    pass


class InstabilityError(NumericError):
    pass


class PartialResultError(SelfHealError):
    def __init__(self, message, completed=0):
        super().__init__(message)
        self.completed = completed
