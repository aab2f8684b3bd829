"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation errors -> 2, numeric aborts -> 3,
I/O problems -> 4.
"""


class MidisentError(Exception):
    """Base class for all library errors."""


class ValidationError(MidisentError, ValueError):
    """Bad configuration, bad labels, or an input that breaks an operation's contract."""


class DimensionError(ValidationError):
    """Shapes do not line up."""


class DegenerateBatchError(ValidationError):
    """A batch is too small or too uniform for the requested statistic."""


class LabelError(ValidationError):
    """A class label is outside the valid range, or a required class is missing."""


class ConfigError(ValidationError):
    """Unknown, missing, or out-of-range configuration value."""


class NumericError(MidisentError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class CheckpointError(MidisentError, IOError):
    """A checkpoint or corpus file is malformed or incompatible."""
