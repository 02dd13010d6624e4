"""Exception hierarchy shared across the package."""


class HifmError(Exception):
    """Base class for all package errors."""


class ValidationError(HifmError):
    """Caller passed an input that violates a precondition."""


class NumericalError(HifmError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class DomainError(HifmError):
    """Input lies outside the mathematical domain of an operation."""


class FormatError(HifmError):
    """A file does not conform to its declared on-disk format."""


class IntegrationError(NumericalError):
    """ODE integration failed; carries the last accepted state."""

    def __init__(self, message, last_t=None, last_state=None, nfe=0,
                 accepted=0, rejected=0):
        super().__init__(message)
        self.last_t = last_t
        self.last_state = last_state
        self.nfe = nfe
        self.accepted = accepted
        self.rejected = rejected
