"""Exception types shared across the package."""


class SdemgError(Exception):
    """Base class for all package errors."""


class ParameterError(SdemgError, ValueError):
    """An argument is outside its admissible range."""


class DegenerateInputError(SdemgError, ValueError):
    """Input carries no usable signal (e.g. zero power)."""


class ContractError(SdemgError, ValueError):
    """Shapes or lengths of the inputs do not agree."""


class SegmentFormatError(SdemgError, OSError):
    """A canonical segment file is malformed."""


class TruncatedFileError(SegmentFormatError):
    """A file ends before its declared payload does."""


class UnsupportedFormatError(SdemgError, ValueError):
    """A WFDB signal uses a storage format this reader does not handle."""

    def __init__(self, code):
        super().__init__(f"unsupported format {code}")
        self.code = code


class InsufficientBeatsError(SdemgError):
    """Too few heartbeats were detected to build an ECG template."""

    def __init__(self, found, required):
        super().__init__(f"insufficient beats: found {found}, need {required}")
        self.found = found
        self.required = required


class NumericalDivergenceError(SdemgError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(SdemgError, OSError):
    """A checkpoint file is unreadable or incompatible."""


class ConfigError(SdemgError, ValueError):
    """Experiment configuration is invalid or inconsistent."""
