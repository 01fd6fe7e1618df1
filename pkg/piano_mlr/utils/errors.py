"""
Exception hierarchy shared by the solvers, loaders and the CLI.
"""


class PianoError(Exception):
    """Base class for every error raised by piano-mlr."""


class DimensionMismatchError(PianoError, ValueError):
    """Array shapes do not agree (d, m or n differ between arguments)."""


class SizeGuardError(PianoError, ValueError):
    """A dense matrix or an enumeration would exceed its size guard."""


class ConfigError(PianoError, ValueError):
    """Invalid solver configuration or flag combination."""


class DataFormatError(PianoError, ValueError):
    """Input file could not be parsed into a dataset."""


class BracketError(PianoError, ValueError):
    """Bisection was asked to search an interval without a sign change."""


class SolverError(PianoError, RuntimeError):
    """A solver could not continue (non-finite objective, failed factorization)."""
