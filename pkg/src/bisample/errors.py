"""Exception types shared across the package."""


class BisampleError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(BisampleError):
    """A caller-supplied value violates an operation's contract."""


class NonFinite(BisampleError):
    """A NaN or infinity appeared where finite values are required."""


class DegenerateVector(BisampleError):
    """A vector with (near-)zero norm cannot be normalized."""


class ShapeError(BisampleError):
    """Array dimensions do not match the operation's expectations."""


class TapeMismatch(BisampleError):
    """A backward pass was attempted with a stale or foreign tape."""


class InvalidBatch(BisampleError):
    """A mini-batch lacks the structure the loss requires."""


class MissingPositive(BisampleError):
    """A sample's own class is absent from the selected prototype slice."""


class NotNormalized(BisampleError):
    """Prototype rows must be unit-norm for margin losses."""


class StaleWorkingSet(BisampleError):
    """The store changed since this working set was sliced out."""


class ResolutionError(BisampleError):
    """The requested FAR target is below what the impostor count supports."""


class ConfigError(BisampleError):
    """A plan or config file contains unknown keys or invalid values."""


class StageDiverged(BisampleError):
    """Training loss became non-finite or exploded."""

    def __init__(self, stage: int, iteration: int, loss: float):
        super().__init__(f"stage {stage} diverged at iteration {iteration} (loss={loss!r})")
        self.stage = stage
        self.iteration = iteration
        self.loss = loss
