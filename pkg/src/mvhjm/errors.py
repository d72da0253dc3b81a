"""Exception hierarchy.

Validation problems (bad inputs, bad files) derive from ``ValidationError``;
numerical failures (blow-ups, invalid damping, divergence) derive from
``NumericalError``.  The CLI maps the two families to exit codes 1 and 2.
"""


class MVHJMError(Exception):
    """Base class for all package errors."""


class ValidationError(MVHJMError, ValueError):
    pass


class NumericalError(MVHJMError, ArithmeticError):
    pass


class DomainError(ValidationError):
    """An argument lies outside the time-to-maturity domain [0, T]."""


class EvaluationError(ValidationError):
    """A test function produced a non-finite value."""


class D1Error(ValidationError):
    """A test function is not certified to satisfy phi'(0) = 0."""


class ContractExpired(ValidationError):
    pass


class PartitionError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class KernelBoundError(ValidationError):
    pass


class DegenerateControl(NumericalError):
    pass


class RiccatiBlowup(NumericalError):
    """The Riccati denominator vanished: the exponential moment does not exist."""


class DampingTooLarge(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class QuadratureWarning(UserWarning):
    pass
