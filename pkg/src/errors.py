"""
Exception types shared by the MIL library and the command line.
"""


class MilError(Exception):
    """Base class for every error raised by this package."""


class DataError(MilError, ValueError):
    """Malformed input: bad files, dimension mismatches, empty classes."""


class NumericalError(MilError, ArithmeticError):
    """NaN or inf reached a computation."""


class UsageError(MilError):
    """Command line misuse."""


class GroundTruthAccessError(DataError):
    """Ground truth of a weakly supervised image was read during training."""
