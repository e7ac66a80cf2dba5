"""Exception hierarchy shared across the package."""


class SCBCHError(Exception):
    """Base class for all package errors."""


class ShapeError(SCBCHError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SCBCHError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericalError(SCBCHError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class SpecError(SCBCHError, ValueError):
    """A generation, noise, split or training configuration is invalid."""


class ParseError(SCBCHError, ValueError):
    """A dataset or config file is malformed."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class EvaluationError(SCBCHError, ValueError):
    """Retrieval evaluation cannot proceed (e.g. empty query set)."""


class CompatibilityError(SCBCHError, ValueError):
    """A checkpoint and a dataset disagree on dimensions."""
