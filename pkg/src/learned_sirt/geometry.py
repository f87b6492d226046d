"""Reconstruction grids and acquisition geometries.

Conventions used everywhere in the package:

* Arrays are indexed in axis order ``(x, y)`` or ``(x, y, z)``; ``z`` is the
  rotation axis in 3D.
* Voxel ``i`` along an axis with ``n`` voxels has its center at
  ``(i - (n - 1) / 2) * pitch``, so the grid is centered on the isocenter.
* Angle ``k`` of ``n`` is ``2 * pi * k / n`` (full orbit, equispaced).
* At angle ``beta`` the source (or, for parallel beam, the ray origin side)
  sits in direction ``(cos beta, sin beta)``; rays travel towards
  ``-(cos beta, sin beta)``. The detector u-axis is ``(-sin beta, cos beta)``
  and the cone-beam v-axis is ``+z``.
* Detector element positions are element centers, symmetric about the
  central ray.

All lengths are in mm, angles in radians.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import GeometryError

__all__ = [
    "GridSpec",
    "ParallelGeometry2D",
    "ConeBeamGeometry",
    "make_grid",
    "make_parallel_geometry",
    "make_cone_geometry",
    "magnification",
    "equispaced_angles",
    "geometry_to_dict",
    "geometry_from_dict",
    "grid_to_dict",
    "grid_from_dict",
]


def equispaced_angles(n_angles):
    k = np.arange(n_angles, dtype=np.float64)
    return 2.0 * np.pi * k / n_angles


def _clean_trig(values):
    # cos(pi/2) etc. come out as ~6e-17; snap them so axis-aligned rays are
    # exactly axis-aligned (ray/grid-line coincidences are then handled
    # consistently).
    values = np.array(values, dtype=np.float64)
    values[np.abs(values) < 1e-12] = 0.0
    return values


def _positive_int(name, value):
    if int(value) != value or value < 1:
        raise GeometryError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def _positive_float(name, value):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise GeometryError(f"{name} must be positive, got {value!r}")
    return value


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid centered on the isocenter with isotropic pitch (mm)."""

    dims: tuple
    pitch: float = 1.0

    def __post_init__(self):
        dims = tuple(_positive_int("grid dimension", d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise GeometryError(f"grid must be 2D or 3D, got dims={self.dims!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "pitch", _positive_float("pitch", self.pitch))

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def size(self):
        return int(np.prod(self.dims))

    @property
    def extent(self):
        return tuple(n * self.pitch for n in self.dims)

    def axis_coords(self, axis):
        n = self.dims[axis]
        return (np.arange(n) - (n - 1) / 2.0) * self.pitch

    def coords(self):
        """Voxel-center coordinate arrays, one per axis, broadcastable to ``dims``."""
        return np.meshgrid(*[self.axis_coords(a) for a in range(self.ndim)], indexing="ij")

    def zeros(self):
        return np.zeros(self.dims)


@dataclass(frozen=True)
class ParallelGeometry2D:
    """2D parallel-beam acquisition over a full circle."""

    n_angles: int
    n_det: int
    det_pitch: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "n_angles", _positive_int("n_angles", self.n_angles))
        object.__setattr__(self, "n_det", _positive_int("n_det", self.n_det))
        object.__setattr__(self, "det_pitch", _positive_float("det_pitch", self.det_pitch))

    ndim = 2

    @property
    def angles(self):
        return equispaced_angles(self.n_angles)

    @property
    def sino_shape(self):
        return (self.n_angles, self.n_det)

    def det_coords(self):
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_pitch

    def rays(self, angle_index):
        """Origins and unit directions of all rays of one projection.

        Origins lie on the line through the isocenter perpendicular to the
        rays, so ``origin + t * direction`` covers the whole ray for real t.
        """
        beta = self.angles[angle_index]
        c, s = _clean_trig([np.cos(beta), np.sin(beta)])
        u = self.det_coords()
        origins = np.stack([-s * u, c * u], axis=-1)
        direction = np.broadcast_to(np.array([-c, -s]), origins.shape)
        return origins, direction


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular-orbit cone beam with a flat panel perpendicular to the central ray."""

    n_angles: int
    det_rows: int
    det_cols: int
    det_pitch: float = 1.0
    sad: float = 1000.0
    sdd: float = 1500.0

    def __post_init__(self):
        for name in ("n_angles", "det_rows", "det_cols"):
            object.__setattr__(self, name, _positive_int(name, getattr(self, name)))
        for name in ("det_pitch", "sad", "sdd"):
            object.__setattr__(self, name, _positive_float(name, getattr(self, name)))
        if self.sad >= self.sdd:
            raise GeometryError(f"need sad < sdd, got sad={self.sad}, sdd={self.sdd}")

    ndim = 3

    @property
    def angles(self):
        return equispaced_angles(self.n_angles)

    @property
    def sino_shape(self):
        return (self.n_angles, self.det_rows, self.det_cols)

    def det_u(self):
        return (np.arange(self.det_cols) - (self.det_cols - 1) / 2.0) * self.det_pitch

    def det_v(self):
        return (np.arange(self.det_rows) - (self.det_rows - 1) / 2.0) * self.det_pitch

    def source_position(self, angle_index):
        beta = self.angles[angle_index]
        c, s = _clean_trig([np.cos(beta), np.sin(beta)])
        return np.array([self.sad * c, self.sad * s, 0.0])

    def rays(self, angle_index):
        """Source position and unit directions to every detector element center.

        Directions have shape ``(det_rows, det_cols, 3)``.
        """
        beta = self.angles[angle_index]
        c, s = _clean_trig([np.cos(beta), np.sin(beta)])
        src = np.array([self.sad * c, self.sad * s, 0.0])
        d0 = -(self.sdd - self.sad) * np.array([c, s, 0.0])
        e_u = np.array([-s, c, 0.0])
        v, u = np.meshgrid(self.det_v(), self.det_u(), indexing="ij")
        pix = d0 + u[..., None] * e_u + v[..., None] * np.array([0.0, 0.0, 1.0])
        d = pix - src
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return src, d


def make_grid(dims, pitch=1.0):
    return GridSpec(tuple(dims), pitch)


def make_parallel_geometry(n_angles, n_det, det_pitch=1.0):
    return ParallelGeometry2D(n_angles, n_det, det_pitch)


def make_cone_geometry(n_angles, det_rows, det_cols, det_pitch=1.0, sad=1000.0, sdd=1500.0):
    return ConeBeamGeometry(n_angles, det_rows, det_cols, det_pitch, sad, sdd)


def magnification(geo):
    """Detector magnification ``sdd / sad`` of a cone-beam geometry."""
    return geo.sdd / geo.sad


def geometry_to_dict(geo):
    if isinstance(geo, ParallelGeometry2D):
        return {"type": "parallel2d", "n_angles": geo.n_angles, "n_det": geo.n_det,
                "det_pitch": geo.det_pitch}
    if isinstance(geo, ConeBeamGeometry):
        return {"type": "cone", "n_angles": geo.n_angles, "det_rows": geo.det_rows,
                "det_cols": geo.det_cols, "det_pitch": geo.det_pitch,
                "sad": geo.sad, "sdd": geo.sdd}
    raise TypeError(f"not a geometry: {geo!r}")


_GEOMETRY_KEYS = {
    "parallel2d": (ParallelGeometry2D, {"n_angles", "n_det", "det_pitch"}),
    "cone": (ConeBeamGeometry, {"n_angles", "det_rows", "det_cols", "det_pitch", "sad", "sdd"}),
}


def geometry_from_dict(d):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _GEOMETRY_KEYS:
        raise GeometryError(f"unknown geometry type {kind!r}")
    cls, allowed = _GEOMETRY_KEYS[kind]
    unknown = set(d) - allowed
    if unknown:
        raise GeometryError(f"unknown {kind} geometry keys: {sorted(unknown)}")
    return cls(**d)


def grid_to_dict(grid):
    return {"dims": list(grid.dims), "pitch": grid.pitch}


def grid_from_dict(d):
    unknown = set(d) - {"dims", "pitch"}
    if unknown:
        raise GeometryError(f"unknown grid keys: {sorted(unknown)}")
    return GridSpec(tuple(d["dims"]), d.get("pitch", 1.0))
