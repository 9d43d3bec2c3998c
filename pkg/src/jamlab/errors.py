"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument violates a documented precondition."""


class ValidationError(ValueError):
    """User-supplied data (configs, pre-packed configurations) failed validation."""


class UnsupportedConfiguration(ValueError):
    """A parameter combination the engine explicitly does not support."""


class HorizonTooSmall(RuntimeError):
    """A finite time horizon did not reach the requested saturation level."""


class DegenerateTail(ValueError):
    """A tail table has no usable points in (0, 1)."""


class ResolutionTooCoarse(RuntimeError):
    """A certification sweep could not certify at the requested resolution."""
