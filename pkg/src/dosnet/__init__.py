"""Dynamic occupancy sets: elliptical per-step regions around predicted trajectories.

The geometry hot loops run in a compiled extension when it is built and fall
back to numpy otherwise; ``dosnet.kernels.BACKEND`` says which one is active.
"""
from .errors import (
    ConfigError, DosError, InvalidCovarianceError, MissingArtifactError, NumericError, ParseError,
    SchemaError, ShapeError,
)
from .geometry import EllipseBatch, EllipseSet, Pose, area, contains, euclidean_distance, mahalanobis
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "DosError", "EllipseBatch", "EllipseSet", "InvalidCovarianceError",
    "MissingArtifactError", "NumericError", "ParseError", "Pose", "SchemaError", "ShapeError",
    "area", "contains", "euclidean_distance", "mahalanobis",
]
