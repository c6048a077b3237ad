"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad argument value or inconsistent inputs."""


class ShapeError(ValidationError):
    """Tensor with an unexpected shape."""


class ConfigError(ValidationError):
    """Invalid or unknown configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint does not match the architecture it is loaded into."""


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, term: str, value: float, step: int):
        self.term = term
        self.value = value
        self.step = step
        super().__init__(f"non-finite loss term {term!r} = {value} at step {step}")
