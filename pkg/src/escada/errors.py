"""Exception hierarchy shared across the package."""


class EscadaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EscadaError, ValueError):
    """Input points do not match the kernel's dimensionality."""


class NumericalError(EscadaError, ArithmeticError):
    """A factorization or variance computation failed beyond tolerance."""


class SaturationError(EscadaError, ValueError):
    """A metric radius is at or above the attainable supremum."""


class DegenerateSetError(EscadaError, ValueError):
    """An admissible dose set needed by a policy is empty."""


class DomainError(EscadaError, ValueError):
    """A dose or context lies outside the problem domain."""


class ConfigError(EscadaError, ValueError):
    """The experiment configuration is invalid."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
