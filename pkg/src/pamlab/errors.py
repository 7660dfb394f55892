"""Exception hierarchy shared by all modules."""


class PamError(Exception):
    """Base class for errors raised by pamlab."""


class DomainError(PamError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(PamError, ValueError):
    """Inputs violate an operation's structural precondition."""


class PreconditionError(ContractError):
    """A stated precondition (e.g. total disconnectedness) does not hold."""


class CoverageError(PamError, LookupError):
    """A query reaches outside the stored lattice box."""


class CertificationError(CoverageError):
    """The box is too small to certify a maximiser at the requested level."""


class ResourceError(PamError, MemoryError):
    """The requested box exceeds the configured memory budget."""


class BudgetError(PamError, RuntimeError):
    """Monte Carlo variance budget exceeded; the estimate would be meaningless."""


class IntegrationError(PamError, RuntimeError):
    """The ODE integrator could not make progress."""


class NumericalError(PamError, ArithmeticError):
    """An iterative or quadrature routine failed to converge."""


class SamplingError(PamError, RuntimeError):
    """Too many Monte Carlo samples could not be certified."""
