"""Exception hierarchy shared by all wsimil modules.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
anything else derived from ``WsimilError`` -> 4.
"""


class WsimilError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(WsimilError, ValueError):
    """Invalid configuration or specification values."""


class DataError(WsimilError):
    """Problem with input data (slides, annotations, datasets)."""


class FormatError(DataError, ValueError):
    """Malformed container, annotation or checkpoint file."""


class ConsistencyError(DataError):
    """File contents disagree with their declared metadata."""


class BoundsError(DataError, IndexError):
    """Request falls outside the addressable area."""


class InputError(WsimilError, ValueError):
    """Argument with the wrong shape, type or value range."""


class DegenerateError(DataError):
    """Input admits no meaningful answer (e.g. single-bin histogram)."""


class SelectionError(DataError):
    """Top-k selection over an empty candidate set."""


class AnnotationError(DataError):
    """Annotations missing where a method requires them."""


class EmptySlideError(DataError):
    """Slide has no tissue tiles to score."""


class ClassError(DataError):
    """Metric requires both classes but only one is present."""


class DatasetError(DataError):
    """Dataset index cannot support the requested sampling."""


class SizeError(InputError):
    """Image too small for the requested tiling."""


class StateError(WsimilError, RuntimeError):
    """Operation called before its prerequisites were computed."""


class LoadError(DataError):
    """Checkpoint cannot be loaded into the requested architecture."""
