"""Exception types shared across the package."""


class RegistrationError(Exception):
    """Base class for all package errors."""


class DimensionError(RegistrationError, ValueError):
    """Array shapes are inconsistent or too small."""


class ValidationError(RegistrationError, ValueError):
    """A parameter violates its documented invariant."""


class DegenerateInputError(RegistrationError, ValueError):
    """Input is well-formed but carries no usable information."""


class ParseError(RegistrationError, ValueError):
    """An image or checkpoint file could not be decoded."""


class ContractError(RegistrationError, RuntimeError):
    """Cached intermediates do not belong to the requested computation."""


class DivergenceError(RegistrationError, ArithmeticError):
    """A loss or gradient became non-finite during optimization."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
