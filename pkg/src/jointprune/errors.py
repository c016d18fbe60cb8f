"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class NumericalFault(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class VersionMismatch(ValueError):
    """A serialized document carries an unexpected schema tag."""


class EvaluatorFailure(RuntimeError):
    """The child evaluator could not score an action."""
