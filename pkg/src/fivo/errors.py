"""Exception types shared across the package."""


class FivoError(Exception):
    """Base class for library errors."""


class UsageError(FivoError, ValueError):
    """Malformed arguments: wrong lengths, unnormalized weights, bad configs."""


class DomainError(FivoError, ValueError):
    """A parameter lies outside its admissible domain (e.g. a non-positive variance)."""


class DegenerateEnsemble(FivoError, FloatingPointError):
    """Every particle carries zero weight, so the weights cannot be normalized."""


class EnsembleCollapse(DegenerateEnsemble):
    """All incremental weights were zero at some step of a filter run."""

    def __init__(self, step, replicate=None):
        self.step = step
        self.replicate = replicate
        where = f" (replicate {replicate})" if replicate is not None else ""
        super().__init__(f"particle ensemble collapsed at step {step}{where}")


class UnsupportedVariant(FivoError, ValueError):
    """A gradient estimator was requested under conditions it does not support."""


class TrainingDiverged(FivoError, FloatingPointError):
    """The training objective became non-finite. Carries the partial history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
