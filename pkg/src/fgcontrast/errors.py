"""Shared exception types.

The CLI maps these onto exit codes: ArgumentError/ShapeError -> 1 (usage),
DataError/FormatError -> 2 (data), numeric-check failures -> 3.
"""


class ArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(ArgumentError):
    """Array shapes are inconsistent with the operation's contract."""


class DataError(ValueError):
    """Input data is malformed or violates an invariant."""


class FormatError(DataError):
    """A file does not conform to its declared format."""


class ContractError(RuntimeError):
    """An internal postcondition or invariant failed."""
