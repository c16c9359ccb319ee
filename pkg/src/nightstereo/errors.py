"""Exception hierarchy shared across the package."""


class NightStereoError(Exception):
    """Base class for all package errors."""


class DimensionError(NightStereoError, ValueError):
    """Tensor shapes do not agree."""


class ContractError(NightStereoError, ValueError):
    """A precondition or shape contract was violated."""


class ConfigurationError(NightStereoError, ValueError):
    """Invalid configuration or operator settings."""


class FormatError(NightStereoError, ValueError):
    """A file does not follow its declared format."""


class VersionError(NightStereoError, ValueError):
    """Checkpoint and configuration are incompatible."""


class TrainingStepError(NightStereoError, RuntimeError):
    """A training step produced a non-finite value."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
