"""Forward projection, matched backprojection and SIRT scalings.

The discrete operator ``A`` is assembled as a sparse system matrix (rows are
detector bins in angle-major order, columns are voxels in C order of the
grid). ``A^T`` is the exact transpose of the same matrix, so the adjoint
identity holds to rounding error.

* 2D parallel beam: exact ray/pixel intersection lengths (Siddon). A ray
  that runs exactly along a grid line gives half its length to each of the
  two pixels sharing that line.
* 3D cone beam: the ray is sampled every half voxel pitch, each sample
  spreads ``step * trilinear weight`` over its 8 neighbouring voxel centers
  (voxels outside the grid count as zero).

Sparse mat-vec products run row by row with a fixed summation order, so
results are bitwise reproducible.
"""

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .exceptions import ShapeError
from .geometry import ConeBeamGeometry, GridSpec, ParallelGeometry2D

__all__ = [
    "Projector",
    "SirtScaling",
    "get_projector",
    "forward_project",
    "back_project",
    "sirt_scalings",
    "apply_scaled_gradient",
    "SAMPLE_STEP",
]

# Sampling interval along 3D rays, in units of the voxel pitch.
SAMPLE_STEP = 0.5

# Entries beyond this are not cached as one matrix; blocks are rebuilt per call.
MATRIX_BUDGET = 60_000_000


def _siddon_2d(origins, directions, grid):
    """Intersection lengths of lines with the pixels of a 2D grid.

    Returns ``(ray, pixel, length)`` triplets; ``pixel`` is the flat C-order
    index into ``grid.dims``.
    """
    nx, ny = grid.dims
    p = grid.pitch
    bounds = [(np.arange(n + 1) - n / 2.0) * p for n in (nx, ny)]
    n_rays = origins.shape[0]

    ts = []
    for axis in range(2):
        o = origins[:, axis:axis + 1]
        d = directions[:, axis:axis + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (bounds[axis][None, :] - o) / d
        t[np.broadcast_to(d == 0, t.shape)] = np.inf
        ts.append(t)
    t = np.sort(np.concatenate(ts, axis=1), axis=1)
    with np.errstate(invalid="ignore"):
        seg = np.diff(t, axis=1)
        mid = 0.5 * (t[:, 1:] + t[:, :-1])
    valid = np.isfinite(seg) & (seg > 0)
    ray = np.broadcast_to(np.arange(n_rays)[:, None], seg.shape)[valid]
    mid = mid[valid]
    length = seg[valid]

    idx = []
    for axis in range(2):
        pos = origins[ray, axis] + mid * directions[ray, axis]
        idx.append(np.floor((pos - bounds[axis][0]) / p).astype(np.int64))
    ix, iy = idx

    # Rays lying on a grid line: share the length between both neighbours.
    rays_out, ix_out, iy_out, len_out = [ray], [ix], [iy], [length]
    for axis in range(2):
        on_line = directions[ray, axis] == 0
        if not on_line.any():
            continue
        off = (origins[ray, axis] - bounds[axis][0]) / p
        on_line &= off == np.floor(off)
        if not on_line.any():
            continue
        len_out[0] = np.where(on_line, 0.5 * len_out[0], len_out[0])
        rays_out.append(ray[on_line])
        len_out.append(len_out[0][on_line])
        if axis == 0:
            ix_out.append(ix[on_line] - 1)
            iy_out.append(iy[on_line])
        else:
            ix_out.append(ix[on_line])
            iy_out.append(iy[on_line] - 1)
    ray = np.concatenate(rays_out)
    ix = np.concatenate(ix_out)
    iy = np.concatenate(iy_out)
    length = np.concatenate(len_out)
    keep = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    return ray[keep], (ix * ny + iy)[keep], length[keep]


def _slab_interval(src, dirs, lo, hi):
    """Parameter interval ``[t_in, t_out]`` of rays inside an axis-aligned box."""
    t_in = np.full(dirs.shape[0], -np.inf)
    t_out = np.full(dirs.shape[0], np.inf)
    for axis in range(3):
        d = dirs[:, axis]
        o = src[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[axis] - o) / d
            t2 = (hi[axis] - o) / d
        parallel = d == 0
        inside = (o >= lo[axis]) & (o <= hi[axis])
        t1 = np.where(parallel, -np.inf if inside else np.inf, t1)
        t2 = np.where(parallel, np.inf if inside else -np.inf, t2)
        t_in = np.maximum(t_in, np.minimum(t1, t2))
        t_out = np.minimum(t_out, np.maximum(t1, t2))
    return t_in, t_out


def _sampled_trilinear_3d(src, dirs, grid, step, max_samples=4_000_000):
    """Triplets ``(ray, voxel, weight)`` for half-pitch trilinear ray sampling."""
    dims = np.array(grid.dims)
    p = grid.pitch
    half = (dims / 2.0 + 0.5) * p  # trilinear support of the outermost voxels
    dt = step * p
    t_in, t_out = _slab_interval(src, dirs, -half, half)
    t0 = -(dirs @ src)  # closest approach to the isocenter anchors the samples
    with np.errstate(invalid="ignore"):
        k_lo = np.ceil((t_in - t0) / dt)
        k_hi = np.floor((t_out - t0) / dt)
    hit = np.isfinite(k_lo) & np.isfinite(k_hi) & (k_hi >= k_lo)
    k_lo = np.where(hit, k_lo, 0).astype(np.int64)
    n_samp = np.where(hit, k_hi - k_lo + 1, 0).astype(np.int64)

    rays_all, vox_all, w_all = [], [], []
    n_rays = dirs.shape[0]
    start = 0
    while start < n_rays:
        # Chunk rays so the sample arrays stay bounded.
        cum = np.cumsum(n_samp[start:])
        stop = start + max(1, int(np.searchsorted(cum, max_samples, side="right")))
        stop = min(stop, n_rays)
        counts = n_samp[start:stop]
        total = int(counts.sum())
        if total:
            ray = np.repeat(np.arange(start, stop), counts)
            first = np.repeat(np.cumsum(counts) - counts, counts)
            k = k_lo[ray] + (np.arange(total) - first)
            t = t0[ray] + k * dt
            pts = src[None, :] + t[:, None] * dirs[ray]
            f = pts / p + (dims - 1) / 2.0
            i0 = np.floor(f).astype(np.int64)
            frac = f - i0
            for corner in range(8):
                offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
                idx = i0 + offs
                w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1) * dt
                keep = np.all((idx >= 0) & (idx < dims), axis=1) & (w > 0)
                flat = (idx[keep, 0] * dims[1] + idx[keep, 1]) * dims[2] + idx[keep, 2]
                rays_all.append(ray[keep])
                vox_all.append(flat)
                w_all.append(w[keep])
        start = stop
    if not rays_all:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    return np.concatenate(rays_all), np.concatenate(vox_all), np.concatenate(w_all)


@dataclass(frozen=True)
class SirtScaling:
    """Diagonals of the SIRT preconditioners: ``C`` per voxel, ``R`` per bin.

    Entries belonging to voxels or bins with zero total weight are 0.
    """

    col_inv: np.ndarray
    row_inv: np.ndarray


def _safe_reciprocal(a):
    out = np.zeros_like(a)
    nz = a > 0
    out[nz] = 1.0 / a[nz]
    return out


class Projector:
    """Matched forward/back projector for one geometry and grid."""

    def __init__(self, geo, grid, matrix_budget=MATRIX_BUDGET):
        if not isinstance(grid, GridSpec):
            raise TypeError(f"expected GridSpec, got {type(grid).__name__}")
        if isinstance(geo, ParallelGeometry2D):
            if grid.ndim != 2:
                raise ShapeError("parallel-beam geometry needs a 2D grid")
        elif isinstance(geo, ConeBeamGeometry):
            if grid.ndim != 3:
                raise ShapeError("cone-beam geometry needs a 3D grid")
        else:
            raise TypeError(f"unsupported geometry {type(geo).__name__}")
        self.geo = geo
        self.grid = grid
        self.rays_per_angle = int(np.prod(geo.sino_shape[1:]))
        self.matrix_budget = matrix_budget
        self._matrix = None
        self._matrix_t = None
        self._scaling = None
        self._cache_ok = self._estimate_nnz() <= matrix_budget

    def _estimate_nnz(self):
        if self.geo.ndim == 2:
            per_ray = 2 * sum(self.grid.dims)
        else:
            per_ray = 4 * math.sqrt(sum(n * n for n in self.grid.dims)) * 2
        return int(per_ray * self.rays_per_angle * self.geo.n_angles)

    def angle_block(self, a):
        """Sparse rows of ``A`` for projection angle ``a``."""
        if self.geo.ndim == 2:
            origins, dirs = self.geo.rays(a)
            ray, vox, w = _siddon_2d(origins, dirs, self.grid)
        else:
            src, dirs = self.geo.rays(a)
            ray, vox, w = _sampled_trilinear_3d(src, dirs.reshape(-1, 3), self.grid, SAMPLE_STEP)
        block = sp.coo_matrix((w, (ray, vox)), shape=(self.rays_per_angle, self.grid.size))
        return block.tocsr()

    @property
    def matrix(self):
        """The full system matrix as CSR (built once, then cached)."""
        if self._matrix is None:
            m = sp.vstack([self.angle_block(a) for a in range(self.geo.n_angles)], format="csr")
            m.sort_indices()
            if not self._cache_ok:
                return m
            self._matrix = m
        return self._matrix

    def _transposed(self):
        if self._matrix_t is None:
            self._matrix_t = self.matrix.T.tocsr()
            self._matrix_t.sort_indices()
        return self._matrix_t

    def _check_volume(self, x):
        x = np.asarray(x)
        if x.shape != self.grid.dims:
            raise ShapeError(f"volume shape {x.shape} does not match grid {self.grid.dims}")
        return x

    def _check_sino(self, s):
        s = np.asarray(s)
        if s.shape != self.geo.sino_shape:
            raise ShapeError(f"sinogram shape {s.shape} does not match geometry {self.geo.sino_shape}")
        return s

    def forward(self, x):
        x = self._check_volume(x).astype(np.float64, copy=False).ravel()
        if self._cache_ok:
            y = self.matrix @ x
        else:
            y = np.concatenate([self.angle_block(a) @ x for a in range(self.geo.n_angles)])
        return y.reshape(self.geo.sino_shape)

    def adjoint(self, s):
        s = self._check_sino(s).astype(np.float64, copy=False).reshape(self.geo.n_angles, -1)
        if self._cache_ok:
            x = self._transposed() @ s.ravel()
        else:
            x = np.zeros(self.grid.size)
            for a in range(self.geo.n_angles):
                x += self.angle_block(a).T @ s[a]
        return x.reshape(self.grid.dims)

    def scalings(self):
        if self._scaling is None:
            row_sum = self.forward(np.ones(self.grid.dims))
            col_sum = self.adjoint(np.ones(self.geo.sino_shape))
            self._scaling = SirtScaling(col_inv=_safe_reciprocal(col_sum),
                                        row_inv=_safe_reciprocal(row_sum))
        return self._scaling

    def scaled_gradient(self, x, y, sc=None):
        """``C A^T R (y - A x)``: the SIRT descent direction."""
        sc = self.scalings() if sc is None else sc
        r = self._check_sino(y) - self.forward(x)
        return sc.col_inv * self.adjoint(sc.row_inv * r)


@functools.lru_cache(maxsize=8)
def get_projector(geo, grid):
    """Shared projector for ``(geo, grid)``; geometry objects are immutable."""
    return Projector(geo, grid)


def forward_project(x, geo, grid=None):
    grid = GridSpec(np.shape(x)) if grid is None else grid
    return get_projector(geo, grid).forward(x)


def back_project(s, geo, grid):
    return get_projector(geo, grid).adjoint(s)


def sirt_scalings(geo, grid):
    return get_projector(geo, grid).scalings()


def apply_scaled_gradient(x, y, sc, geo, grid=None):
    grid = GridSpec(np.shape(x)) if grid is None else grid
    return get_projector(geo, grid).scaled_gradient(x, y, sc)
