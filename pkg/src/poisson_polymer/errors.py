"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class ContractError(ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class CapacityError(ValueError):
    """Requested order exceeds the configured combinatorial guard."""


class ToleranceError(RuntimeError):
    """A numerical integration missed its target tolerance."""

    def __init__(self, message, achieved):
        super().__init__(f"{message} (achieved {achieved:.3g})")
        self.achieved = achieved


class TruncationError(RuntimeError):
    """Chaos truncation tail bound exceeds the requested tolerance."""

    def __init__(self, message, bound):
        super().__init__(f"{message} (tail bound {bound:.3g})")
        self.bound = bound


class BudgetExceededError(RuntimeError):
    """Adaptive estimation ran out of path budget."""

    def __init__(self, message, achieved_stderr, partial=None):
        super().__init__(f"{message} (achieved relative stderr {achieved_stderr:.3g})")
        self.achieved_stderr = achieved_stderr
        self.partial = partial


class StabilityError(DomainError):
    """Explicit scheme violates dt <= dx^2/2."""


class NegativityError(RuntimeError):
    """Too many negative cells in a discrete SHE field."""

    def __init__(self, fraction):
        super().__init__(f"negative cell fraction {fraction:.3g} exceeds 0.1%")
        self.fraction = fraction


class ConfigError(ValueError):
    """Malformed or unknown experiment configuration."""
