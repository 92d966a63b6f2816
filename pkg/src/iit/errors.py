"""Exception types shared across the package."""


class IITError(Exception):
    """Base class for all errors raised by this package."""


class CycleError(IITError):
    pass


class ArityError(IITError):
    pass


class UnknownVariable(IITError, KeyError):
    pass


class MissingInput(IITError):
    pass


class TypeMismatch(IITError):
    pass


class DomainError(IITError, ValueError):
    pass


class NonEnumerableInputs(IITError):
    pass


class ShapeError(IITError, ValueError):
    pass


class RangeError(IITError, IndexError):
    pass


class NonScalarLoss(IITError):
    pass


class NonFiniteValue(IITError, ArithmeticError):
    pass


class UnknownSite(IITError, KeyError):
    pass


class EmptyDataset(IITError, ValueError):
    pass


class DivergenceError(IITError, ArithmeticError):
    pass


class ParseError(IITError, ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (token {position})")
        self.position = position


class NoTarget(IITError):
    pass


class AmbiguousTarget(IITError):
    pass


class ChecksumMismatch(IITError):
    pass


class ConfigError(IITError):
    pass
