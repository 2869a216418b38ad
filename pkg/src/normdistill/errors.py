"""Exception hierarchy shared across the package."""


class NormdistillError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(NormdistillError):
    """Invalid or inconsistent configuration (bad shapes, bad hyperparameters, unknown keys)."""


class BackendUnavailableError(ConfigurationError):
    """A requested encoder backend needs an optional dependency that is not installed."""


class InputError(NormdistillError):
    """Caller passed data that violates an operation's preconditions."""


class DegenerateInputError(InputError):
    """Numerically degenerate input, e.g. a zero-norm feature tensor."""


class BackendError(NormdistillError):
    """A frozen backend produced invalid output (NaN/Inf features)."""


class DatasetIntegrityError(NormdistillError):
    """Dataset layout violates the expected structure (missing masks, bad splits, size mismatch)."""


class CheckpointError(NormdistillError):
    """Checkpoint file is missing, truncated or otherwise unreadable."""


class CheckpointCompatibilityError(CheckpointError):
    """Checkpoint was produced under a different model configuration."""


class TrainingDivergenceError(NormdistillError):
    """Training produced a non-finite loss."""


class UndefinedMetricError(NormdistillError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class PipelineStageError(NormdistillError):
    """Wraps a failure inside the forward pipeline with the name of the failing stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
