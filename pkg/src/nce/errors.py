class NCEError(Exception):
    """Base class; the CLI prints ``<ClassName>: <message>`` on one line."""


class ConfigError(NCEError, ValueError):
    pass


class InputError(NCEError, ValueError):
    pass


class UsageError(NCEError, RuntimeError):
    pass


class NumericError(NCEError, ArithmeticError):
    pass


class FormatError(NCEError, ValueError):
    pass


class PhaseError(UsageError):
    pass
