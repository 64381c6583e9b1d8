"""
EarCAN Errors
=============
One hierarchy for every failure the pipeline can report.

Each class also derives from the closest builtin so callers that only know
about ValueError / IndexError / RuntimeError keep working.
"""

from typing import Optional


class EarCanError(Exception):
    """Base class for all EarCAN errors."""


class RateMismatchError(EarCanError, ValueError):
    """Two signals with different sample rates were combined."""

    def __init__(self, rate_a: int, rate_b: int):
        super().__init__(f"Sample rate mismatch: {rate_a} Hz vs {rate_b} Hz")
        self.rate_a = rate_a
        self.rate_b = rate_b


class EmptyInputError(EarCanError, ValueError):
    """An operation received an empty signal."""


class TruncationError(EarCanError, ValueError):
    """A transform length shorter than the signal was requested."""


class WavFormatError(EarCanError, ValueError):
    """A WAV file violates the 16-bit PCM mono contract."""

    def __init__(self, field: str, detail: str):
        super().__init__(f"WAV format error in '{field}': {detail}")
        self.field = field


class ConfigError(EarCanError, ValueError):
    """Invalid configuration value or range."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class SpecError(EarCanError, ValueError):
    """Chirp specification is invalid or does not match the signal."""


class SoundingFailedError(EarCanError, RuntimeError):
    """Deconvolution found no impulse peak above the noise floor."""


class TooShortError(EarCanError, ValueError):
    """Input is shorter than the frame or kernel span requires."""


class StratificationError(EarCanError, ValueError):
    """A label has too few items for a stratified split."""


class TrainingDivergedError(EarCanError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"Training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


class LabelIndexError(EarCanError, IndexError):
    """Class label outside the classifier's range."""


class DegenerateTemplateError(EarCanError, ValueError):
    """Embeddings cancel out and leave no direction to normalize."""


class DimensionMismatchError(EarCanError, ValueError):
    """Vectors of different dimension were compared."""


class ProtocolError(EarCanError, RuntimeError):
    """Session machine called out of phase, or a challenge verified twice."""


class PreconditionError(EarCanError, RuntimeError):
    """An adversary mode lacks what it needs (e.g. no recorded history)."""


class DomainError(EarCanError, ValueError):
    """Argument outside the function's domain."""


class OptimizationFailedError(EarCanError, RuntimeError):
    """Watermark optimizer produced a non-finite gradient."""


class PatchTooHotError(EarCanError, RuntimeError):
    """Applying a patch clipped more than the allowed fraction of samples."""


class ReportConsistencyError(EarCanError, ValueError):
    """Trial counts in a metrics report do not add up."""


class StageError(EarCanError, RuntimeError):
    """A pipeline stage failed; carries the stage name and config hash."""

    def __init__(self, stage: str, config_hash: str, cause: Exception):
        super().__init__(f"Stage '{stage}' failed (config {config_hash}): {cause}")
        self.stage = stage
        self.config_hash = config_hash
        self.cause = cause
