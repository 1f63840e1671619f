"""Exception types shared across the library."""


class TrackingError(Exception):
    """Base class for all library-specific failures."""


class DegenerateTriangleError(TrackingError):
    """Triangle area fell below the degeneracy threshold."""


class TimeOutOfWindowError(TrackingError):
    """Query time lies outside the trajectory time grid."""


class OutsideMeshError(TrackingError):
    """Point is not contained in any mesh triangle."""


class TooFewEventsError(TrackingError):
    """Window holds fewer events than requested bins."""


class NoAssociatedEventsError(TrackingError):
    """Every event in the requested subset fell outside the mesh."""


class InvalidSampleDensityError(TrackingError):
    """Barycentric sample density must be at least 1 per edge."""


class OutOfImageError(TrackingError):
    """Sample coordinate lies outside the image bounds."""


class ZeroVarianceError(TrackingError):
    """Intensity samples have (near-)zero variance."""


class NoTextureError(TrackingError):
    """All subregions were rejected as textureless."""


class RigidStageDivergedError(TrackingError):
    """Rigid motion estimation kept increasing the loss."""


class TableMismatchError(TrackingError):
    """Prediction and ground-truth tables are not aligned."""


class NoSurvivorsError(TrackingError):
    """No surviving points remain for the filtered error metric."""


class ConfigError(TrackingError):
    """Malformed configuration file or invalid parameter value."""
