"""Exception types shared across the package.

The CLI maps every one of these to a nonzero exit status; library callers
can catch them individually.
"""


class FedcalError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FedcalError, ValueError):
    """An argument violates a documented precondition."""


class ResourceLimitError(FedcalError):
    """A guarded computation would exceed its configured size cap."""


class InfeasibleError(FedcalError):
    """No parameter choice satisfies the requested coverage constraint."""


class InternalError(FedcalError):
    """A numeric invariant failed mid-computation; results were discarded."""


class ProtocolViolationError(FedcalError):
    """A simulated protocol run broke the one-message-per-agent rule."""
