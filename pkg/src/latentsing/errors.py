"""Exception hierarchy and CLI exit codes."""


class LatentSingError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(LatentSingError):
    """Bad user input: config values, missing files, malformed data."""

    exit_code = 2


class AudioIOError(ValidationError):
    """WAV file cannot be read."""


class MissingFileError(AudioIOError):
    """Input path does not exist."""


class NotAWavError(AudioIOError):
    """File exists but is not a RIFF/WAV container."""


class UnsupportedBitDepthError(AudioIOError):
    """WAV sample format other than PCM16."""


class ClipTooShortError(ValidationError):
    """Clip shorter than one analysis window."""


class UnvoicedContourError(ValidationError):
    """Operation requires at least one voiced frame."""


class CompatibilityError(LatentSingError):
    """Checkpoint/config mismatch or wrong stage ordering."""

    exit_code = 3


class StageOrderError(CompatibilityError):
    """A training stage was invoked before its prerequisite stage."""


class CheckpointError(LatentSingError):
    """Corrupt or unreadable checkpoint container."""


class DivergenceError(LatentSingError):
    """Training produced a non-finite loss."""
