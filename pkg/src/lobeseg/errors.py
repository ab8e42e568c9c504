"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes, so new failure modes should subclass
one of the families below rather than ``LobeSegError`` directly.
"""


class LobeSegError(Exception):
    """Root of all package errors."""


class ContractError(LobeSegError, ValueError):
    """An operation was called with arguments that violate its shape/type contract."""


class ConfigurationError(LobeSegError, ValueError):
    """Invalid configuration or hyper-parameter."""


class DataValidationError(LobeSegError, ValueError):
    """Input data does not satisfy the documented invariants."""


class GenerationError(LobeSegError, RuntimeError):
    """Phantom generation produced an unusable sample (retry with another seed)."""


class NumericalError(LobeSegError, FloatingPointError):
    """A loss or parameter became non-finite."""


class VolumeIOError(LobeSegError, OSError):
    """Base class for volume file read/write failures."""


class VolumeHeaderError(VolumeIOError):
    """Malformed or incomplete volume header."""


class VolumeTruncatedError(VolumeIOError):
    """Payload byte length disagrees with the header."""


class UnsupportedFormatError(VolumeIOError):
    """Unknown dtype tag, role, or format version."""


class CheckpointError(LobeSegError):
    """Base class for checkpoint failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointIntegrityError(CheckpointError):
    """A tensor block failed its checksum or the container is corrupt."""


class CheckpointIncompatibleError(CheckpointError):
    """Checkpoint contents disagree with the requested model configuration."""

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


class VolumeMismatchError(VolumeIOError):
    """Header fields or files of one case disagree (dtype vs role, shape across files)."""
