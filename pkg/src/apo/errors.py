"""Exception hierarchy shared by every module of the package."""


class ApoError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(ApoError, ValueError):
    pass


class InvalidMdp(ApoError, ValueError):
    pass


class InvalidPolicy(ApoError, ValueError):
    pass


class SingularSystem(ApoError, ArithmeticError):
    pass


class NegativeVariance(ApoError, ArithmeticError):
    pass


class NegativeK(ApoError, ValueError):
    pass


class BadParam(ApoError, ValueError):
    pass


class ShapeMismatch(ApoError, ValueError):
    pass


class NonFiniteOutput(ApoError, ArithmeticError):
    pass


class NonFiniteGradient(ApoError, ArithmeticError):
    pass


class NonFiniteAdvantage(ApoError, ArithmeticError):
    pass


class OutOfSupport(ApoError, ValueError):
    pass


class FamilyMismatch(ApoError, TypeError):
    pass


class EmptyBatch(ApoError, ValueError):
    pass


class EnvFault(ApoError, RuntimeError):
    pass


class NoCompletedEpisodes(ApoError, ValueError):
    pass


class CgBreakdown(ApoError, ArithmeticError):
    pass


class CheckpointError(ApoError, ValueError):
    pass


class ConfigError(ApoError, ValueError):
    """Bad configuration; ``line`` is the 1-based source line when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedSignCase(ApoError, ValueError):
    pass


class DivisionByZero(ApoError, ZeroDivisionError):
    pass
