"""Exception hierarchy shared by all modules."""


class GPSEDFError(Exception):
    """Base class for package errors."""


class DomainError(GPSEDFError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ContractError(GPSEDFError, ValueError):
    """Arguments violate a documented precondition."""


class NumericalError(GPSEDFError, ArithmeticError):
    """A factorization or solve failed even after regularization."""


class ExtrapolationError(DomainError):
    """A spline surrogate was evaluated outside its knot box."""

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class ConvergenceError(NumericalError):
    """Nonlinear solver exhausted its iteration budget."""

    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class TrainingError(NumericalError):
    """Variational training produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ParseError(GPSEDFError, ValueError):
    """Malformed observation file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
