"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the space an operation is defined on."""


class ConfigError(ValueError):
    """A configuration value violates its constraint."""


class UnsupportedOperation(NotImplementedError):
    """The operation is not defined for this kind of object."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class TrainingError(RuntimeError):
    """A loss became non-finite; the epoch was rolled back."""


class CheckpointVersionError(RuntimeError):
    pass


class CheckpointCorruptError(RuntimeError):
    pass
