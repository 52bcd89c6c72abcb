class InvalidArgumentError(ValueError):
    pass


class InvalidEmbeddingError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    """Raised when a scalar function returns a non-finite value during gradient checking."""


class DivergedTrainingError(RuntimeError):
    """Training produced a non-finite loss.

    Carries the epoch, the offending loss components and whatever history was
    completed before the failure so callers can flush it.
    """

    def __init__(self, epoch, components, history=None):
        self.epoch = epoch
        self.components = dict(components)
        self.history = list(history or [])
        parts = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}: {parts}")
