"""Exceptions to be raised and caught in the library."""


class SobolpruneException(Exception):
    """Base exception for all library-specific exceptions."""


class IntervalError(SobolpruneException, ValueError):
    """An interval operation is undefined for the given bounds."""


class TapeError(SobolpruneException, RuntimeError):
    """
    Error raised when a tape cannot be recorded or reversed, for example
    because of an unsupported operation or a seed of the wrong shape.
    """


class ShapeError(SobolpruneException, ValueError):
    """Array dimensions do not agree."""


class PruneError(SobolpruneException, ValueError):
    """A structural edit of a network is not allowed."""


class ModelFormatError(SobolpruneException, ValueError):
    """A serialised model could not be read."""


class MarketError(SobolpruneException, ValueError):
    """The market model cannot be evaluated for this configuration."""


class NumericalError(SobolpruneException, ArithmeticError):
    """
    Error raised when a computation produces non-finite numbers,
    e.g. a diverging training run.
    """


class MetricError(SobolpruneException, ValueError):
    """A metric is undefined for the given data."""


class ConfigError(SobolpruneException, ValueError):
    """The experiment configuration is invalid or inconsistent."""


class ArtifactError(SobolpruneException, FileNotFoundError):
    """An artifact required by a pipeline stage is missing."""
