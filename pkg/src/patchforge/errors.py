"""Exception and warning types shared across the package."""

from __future__ import annotations


class PatchForgeError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(PatchForgeError, ValueError):
    """An argument violated a documented precondition."""


class EmptyCorpusError(PatchForgeError):
    """An operation that needs background records received a corpus with none."""


class ConfigError(PatchForgeError):
    """A run configuration could not be parsed or validated.

    ``key`` names the offending entry when one can be identified.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class CheckpointError(PatchForgeError):
    """A checkpoint file is missing, unreadable, or structurally wrong."""


class TrainingFailedError(PatchForgeError):
    """Detector training ended below the required clean detection rate."""

    def __init__(self, detection_rate: float, required_rate: float, epochs: int):
        super().__init__(
            f"clean detection rate {detection_rate:.1f}% after {epochs} epochs, "
            f"required {required_rate:.1f}%"
        )
        self.detection_rate = detection_rate
        self.required_rate = required_rate
        self.epochs = epochs


class NonFiniteLossError(PatchForgeError):
    """An attack objective became NaN or infinite.

    ``diagnostic`` carries the state needed to reproduce the failure
    (iteration index, offending loss value, and the current patch pixels).
    """

    def __init__(self, iteration: int, loss_value: float, diagnostic: dict | None = None):
        super().__init__(f"non-finite loss {loss_value!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss_value = loss_value
        self.diagnostic = diagnostic or {}


class DegenerateGeometryWarning(UserWarning):
    """A geometric input collapsed below one pixel or left its valid range."""
