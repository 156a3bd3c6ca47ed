class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DataError(ValueError):
    """Input data is malformed or empty after filtering."""
