class RASNetError(Exception):
    pass


class ConfigError(RASNetError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(RASNetError, ValueError):
    pass


class ValidationError(RASNetError, ValueError):
    pass


class WeightLoadError(RASNetError, OSError):
    pass


class CheckpointError(RASNetError):
    """Checkpoint missing, corrupt, or incompatible with the requested model."""


class UndefinedMetricError(RASNetError, ArithmeticError):
    """Class absent from both prediction and truth: dice/iou are 0/0."""


class NonFiniteLossError(RASNetError, FloatingPointError):
    def __init__(self, step, batch_indices, breakdown):
        self.step = step
        self.batch_indices = list(batch_indices)
        self.breakdown = breakdown
        super().__init__(
            f"non-finite loss at step {step} (batch frames {self.batch_indices}): {breakdown}"
        )


class DataError(RASNetError, OSError):
    """A dataset file could not be read or decoded."""
