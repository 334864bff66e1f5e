"""Exception hierarchy shared by the library and the CLI.

Every error derives from CpcLabError and from the builtin it refines, so
callers can catch either one.
"""


class CpcLabError(Exception):
    """Base class for every error raised on purpose by cpc-lab."""


class ShapeError(CpcLabError, ValueError):
    pass


class InputTooShortError(CpcLabError, ValueError):
    pass


class NonFiniteError(CpcLabError, FloatingPointError):
    pass


class HorizonError(CpcLabError, ValueError):
    pass


class StrategyInfeasibleError(CpcLabError, ValueError):
    pass


class ProbeDataError(CpcLabError, ValueError):
    pass


class ConfigError(CpcLabError, ValueError):
    def __init__(self, message: str, fields=None):
        super().__init__(message)
        self.fields = list(fields or [])


class CheckpointError(CpcLabError, ValueError):
    pass


class MissingCheckpointError(CpcLabError, FileNotFoundError):
    pass


class UnsupportedTaskError(CpcLabError, ValueError):
    pass


class DomainError(CpcLabError, ValueError):
    """An argument outside the domain of a formula (N < 1, non-positive ratio, ...)."""
