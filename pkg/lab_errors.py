"""
Wiener Lab Errors
Exception types shared by the laboratory modules
"""


class LabError(Exception):
    """Base class for every error raised by the laboratory."""


class ConfigError(LabError, ValueError):
    """Run configuration is invalid (raised before any computation)."""


class GridMismatch(LabError, ValueError):
    """Two grid-valued objects do not live on the same time grid."""


class NonFiniteValue(LabError, ValueError):
    """A user supplied callable returned NaN or infinity."""


class DegenerateGamma(LabError):
    """gamma is below tolerance, so 1/gamma is undefined on this path."""


class InsufficientLocalSamples(LabError):
    """A kernel window around a level holds too few effective samples."""


class EmptySlab(LabError):
    """No sampled path falls inside the requested slab."""


class EnsembleFormatError(LabError):
    """Binary ensemble file has a corrupt or unknown header."""


class EnsembleShapeMismatch(EnsembleFormatError):
    """Binary ensemble file does not match the expected shape."""
