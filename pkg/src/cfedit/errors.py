"""Shared exception types."""


class ShapeError(ValueError):
    """Array shapes do not conform to the operation's contract."""


class TimestepError(ValueError):
    """Timestep outside the schedule's valid range."""


class ConfigError(ValueError):
    """A configuration value is outside its documented range."""


class SamplingDiverged(RuntimeError):
    """A reverse-diffusion intermediate became non-finite."""

    def __init__(self, timestep: int):
        super().__init__(f"non-finite sample at timestep {timestep}")
        self.timestep = timestep


class AdapterFileError(RuntimeError):
    """Adapter archive is corrupt or has an incompatible version."""


class BackendLoadError(RuntimeError):
    """Backend weights are missing or incompatible."""


class SessionStateError(RuntimeError):
    """Session is not in the state the operation requires."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss)."""

    def __init__(self, message: str, iteration: int | None = None, timestep: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.timestep = timestep
