"""Learned SIRT for parallel-beam and cone-beam CT, with classical baselines.

Arrays are indexed ``(x, y[, z])`` with ``z`` the rotation axis; lengths
are in mm.
"""

from .exceptions import (ConfigError, DivergenceError, FitError, GeometryError, LsirtError,
                         NumericError, ShapeError, TapeError)
from .geometry import (ConeBeamGeometry, GridSpec, ParallelGeometry2D, make_cone_geometry,
                       make_grid, make_parallel_geometry)
from .projector import Projector, back_project, forward_project, get_projector, sirt_scalings

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DivergenceError", "FitError", "GeometryError", "LsirtError",
    "NumericError", "ShapeError", "TapeError",
    "ConeBeamGeometry", "GridSpec", "ParallelGeometry2D",
    "make_cone_geometry", "make_grid", "make_parallel_geometry",
    "Projector", "back_project", "forward_project", "get_projector", "sirt_scalings",
]
