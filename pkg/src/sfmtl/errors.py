"""Exception hierarchy shared by every module."""


class SFMTLError(Exception):
    """Base class for simulator errors."""


class ConfigurationError(SFMTLError, ValueError):
    pass


class InputError(SFMTLError, ValueError):
    pass


class ProtocolError(SFMTLError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NumericalError(SFMTLError, ArithmeticError):
    pass


class FormatError(SFMTLError, ValueError):
    pass


class SizeError(SFMTLError, ValueError):
    pass


class StabilityWarning(UserWarning):
    """The server head update may overshoot (step times degree >= 1)."""
