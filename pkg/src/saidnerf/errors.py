"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class NumericFault(FloatingPointError):
    """A non-finite value appeared in parameters, densities or losses."""


class ContractViolation(RuntimeError):
    """An operation was called out of order, e.g. backward without a cache."""
