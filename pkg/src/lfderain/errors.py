"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: numeric problems exit with 2, every
other contract/format violation exits with 1.
"""


class LfDerainError(Exception):
    """Base class for all package errors."""


class ShapeError(LfDerainError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(LfDerainError, ValueError):
    """An argument lies outside the domain of the operation."""


class ContractError(LfDerainError, RuntimeError):
    """A usage precondition was violated (frozen weights, ordering, ...)."""


class FormatError(LfDerainError, ValueError):
    """A file on disk does not follow the expected layout."""


class BoundsError(LfDerainError, IndexError):
    """A crop or index falls outside the array."""


class NumericError(LfDerainError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
