"""Exception types raised by the tracking services."""


class PRLTrackError(Exception):
    """Base class for every error the tracker raises on purpose."""


class ShapeError(PRLTrackError, ValueError):
    """A tensor or layer received extents it cannot work with."""


class ConfigError(PRLTrackError, ValueError):
    """A configuration file or object failed validation."""


class DatasetError(PRLTrackError, ValueError):
    """A sequence directory, ground-truth file or results file is malformed."""


class WeightsFormatError(PRLTrackError, ValueError):
    """A PRLW weights container is truncated or corrupt."""
