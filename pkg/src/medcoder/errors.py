"""Exception types shared across the package."""


class MedcoderError(Exception):
    """Base class for all package errors."""


class ShapeError(MedcoderError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InputError(MedcoderError, ValueError):
    """An input value violates an operation's preconditions."""


class SequenceLengthError(InputError):
    """A token sequence exceeds the configured position limit."""


class VocabError(MedcoderError, ValueError):
    """A token id is outside the embedding table / vocabulary range."""


class CapacityError(MedcoderError, ValueError):
    """The prompt region alone does not fit the position limit."""


class ConfigError(MedcoderError, ValueError):
    """A configuration value or required artifact is invalid/missing."""


class SamplingError(MedcoderError, RuntimeError):
    """A minibatch cannot be drawn under the sampler configuration."""


class TrainingError(MedcoderError, RuntimeError):
    """Training diverged (non-finite loss) or otherwise failed."""


class BuildError(MedcoderError, ValueError):
    """A dataset builder cannot satisfy its output contract."""


class NumericsError(MedcoderError, ArithmeticError):
    """A numeric precondition failed (e.g. zero-norm vector)."""
