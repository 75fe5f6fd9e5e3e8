"""Exception types shared across the package."""


class NarxMpcError(Exception):
    """Base class for all package-specific failures."""


class TrainingFailure(NarxMpcError):
    """Raised when optimization diverges (NaN loss); carries the epoch index."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class IntegrationFailure(NarxMpcError):
    """Plant state left the physically valid region during integration."""


class EquilibriumNotFound(NarxMpcError):
    """Newton iteration on the equilibrium condition did not converge."""


class InfeasibleEquilibrium(NarxMpcError):
    """Equilibrium exists but its input violates the input constraint set."""


class InvalidPlant(NarxMpcError):
    """The linearized model has a singular DC gain (invariant zero at 1)."""


class SynthesisFailure(NarxMpcError):
    """No stabilizing integrator gain could be found."""


class NumericalFailure(NarxMpcError):
    """An underlying numerical routine failed (eigensolver, NaN iterates)."""


class ConfigurationError(NarxMpcError):
    """Inconsistent configuration, e.g. an empty tightened constraint set."""
