"""Synthetic training and evaluation objects, and the measurement noise model."""

import numpy as np

from .exceptions import ShapeError
from .rng import make_rng

NOISE_LEVELS = {"low": 0.0025, "medium": 0.0225, "high": 0.0625}

# value, semi-axis x, semi-axis y, center x, center y, rotation (deg);
# coordinates normalised so the grid spans [-1, 1].
SHEPP_LOGAN_2D = np.array([
    [2.00, .6900, .9200, 0.0000, 0.0000, 0.0],
    [-.98, .6624, .8740, 0.0000, -.0184, 0.0],
    [-.02, .1100, .3100, 0.2200, 0.0000, -18.0],
    [-.02, .1600, .4100, -.2200, 0.0000, 18.0],
    [0.01, .2100, .2500, 0.0000, 0.3500, 0.0],
    [0.01, .0460, .0460, 0.0000, 0.1000, 0.0],
    [0.01, .0460, .0460, 0.0000, -.1000, 0.0],
    [0.01, .0460, .0230, -.0800, -.6050, 0.0],
    [0.01, .0230, .0230, 0.0000, -.6060, 0.0],
    [0.01, .0230, .0460, 0.0600, -.6050, 0.0],
])

# value, semi-axes (x, y, z), center (x, y, z), rotation about z (deg)
SHEPP_LOGAN_3D = np.array([
    [2.00, .6900, .9200, .810, 0.0000, 0.0000, 0.00, 0.0],
    [-.98, .6624, .8740, .780, 0.0000, -.0184, 0.00, 0.0],
    [-.02, .1100, .3100, .220, 0.2200, 0.0000, 0.00, -18.0],
    [-.02, .1600, .4100, .280, -.2200, 0.0000, 0.00, 18.0],
    [0.01, .2100, .2500, .410, 0.0000, 0.3500, 0.00, 0.0],
    [0.01, .0460, .0460, .050, 0.0000, 0.1000, 0.00, 0.0],
    [0.01, .0460, .0460, .050, 0.0000, -.1000, 0.00, 0.0],
    [0.01, .0460, .0230, .050, -.0800, -.6050, 0.00, 0.0],
    [0.01, .0230, .0230, .020, 0.0000, -.6060, 0.00, 0.0],
    [0.01, .0230, .0460, .020, 0.0600, -.6050, 0.00, 0.0],
])


def _check_dims(dims, ndim, minimum):
    dims = tuple(int(d) for d in dims)
    if len(dims) != ndim:
        raise ShapeError(f"expected {ndim} dimensions, got {dims}")
    if min(dims) < minimum:
        raise ShapeError(f"every dimension must be >= {minimum}, got {dims}")
    return dims


def _voxel_coords(dims):
    """Voxel-center coordinates in voxel units, centered on the grid middle."""
    axes = [np.arange(n) - (n - 1) / 2.0 for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _fill_triangle(image, verts):
    """Add 1 to every pixel whose center lies in the triangle.

    Pixel centers are at integer coordinates. Edges are owned with a
    top-left style rule (``>= 0`` on edges oriented one way, ``> 0`` on the
    other) so two triangles sharing an edge never both claim a pixel.
    """
    nx, ny = image.shape
    (x0, y0), (x1, y1), (x2, y2) = verts
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if area == 0:
        return np.zeros_like(image, dtype=bool)
    if area < 0:
        x1, y1, x2, y2 = x2, y2, x1, y1
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    inside = np.ones(image.shape, dtype=bool)
    for (ax, ay), (bx, by) in (((x0, y0), (x1, y1)), ((x1, y1), (x2, y2)), ((x2, y2), (x0, y0))):
        e = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        owns = (by > ay) or (by == ay and bx < ax)
        inside &= (e >= 0) if owns else (e > 0)
    return inside


def gen_triangles(seed, dims=(128, 128), n_triangles=6):
    """Sum of six filled random triangles, scaled to unit L2 norm.

    Vertices are uniform over the image, per-triangle intensities are
    Gamma(1, 1) draws.
    """
    dims = _check_dims(dims, 2, 8)
    rng = make_rng(seed, "phantom", 0)
    image = np.zeros(dims)
    # all draws up front, in a fixed order
    verts = rng.uniform(0.0, 1.0, size=(n_triangles, 3, 2)) * (np.array(dims) - 1)
    values = rng.gamma(shape=1.0, scale=1.0, size=n_triangles)
    for v, value in zip(verts, values):
        image[_fill_triangle(image, v)] += value
    norm = np.linalg.norm(image)
    if norm == 0:
        return image
    return image / norm


def sample_ellipsoid_params(rng, dims, n):
    """Centers (voxels from grid center), radii (voxels) and intensities.

    Radii are the absolute value of a zero-mean uniform draw whose variance
    is ``size / 3`` (i.e. bound ``sqrt(size)``) for the axis length ``size``.
    """
    dims = np.asarray(dims, dtype=np.float64)
    centers = (rng.uniform(0.0, 1.0, size=(n, 3)) - 0.5) * dims
    radii = np.abs(rng.uniform(-1.0, 1.0, size=(n, 3)) * np.sqrt(dims))
    values = rng.standard_normal(n)
    return centers, radii, values


def gen_ellipsoids(seed, dims=(128, 128, 128), n_ellipsoids=20):
    """Sum of 20 random axis-aligned ellipsoids with standard-normal intensities."""
    dims = _check_dims(dims, 3, 8)
    rng = make_rng(seed, "phantom", 0)
    centers, radii, values = sample_ellipsoid_params(rng, dims, n_ellipsoids)
    x, y, z = _voxel_coords(dims)
    vol = np.zeros(dims)
    for c, r, v in zip(centers, radii, values):
        r = np.maximum(r, 1e-6)
        inside = ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0
        vol[inside] += v
    return vol


def _render_ellipses(table, dims):
    ndim = len(dims)
    # normalised coordinates: the full grid spans [-1, 1] per axis
    coords = [c / (n / 2.0) for c, n in zip(_voxel_coords(dims), dims)]
    out = np.zeros(dims)
    for row in table:
        value = row[0]
        axes = row[1:1 + ndim]
        center = row[1 + ndim:1 + 2 * ndim]
        phi = np.deg2rad(row[1 + 2 * ndim])
        dx = coords[0] - center[0]
        dy = coords[1] - center[1]
        c, s = np.cos(phi), np.sin(phi)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        q = (u / axes[0]) ** 2 + (v / axes[1]) ** 2
        if ndim == 3:
            q = q + ((coords[2] - center[2]) / axes[2]) ** 2
        out[q <= 1.0] += value
    return out


def shepp_logan(dims):
    """Shepp-Logan phantom (original intensities, skull = 2.0) in 2D or 3D."""
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        dims = _check_dims(dims, 2, 16)
        return _render_ellipses(SHEPP_LOGAN_2D, dims)
    dims = _check_dims(dims, 3, 16)
    return _render_ellipses(SHEPP_LOGAN_3D, dims)


def gen_gaussian_square(amplitude, dims=(128, 128), pitch=1.0):
    """``amplitude * exp(-0.002 (x^2 + y^2))`` (mm) with a square zeroed out.

    The square has side ``n/4`` voxels and is centered ``n/8`` voxels off the
    middle in +x and +y.
    """
    dims = _check_dims(dims, 2, 16)
    x, y = _voxel_coords(dims)
    image = amplitude * np.exp(-0.002 * ((x * pitch) ** 2 + (y * pitch) ** 2))
    nx, ny = dims
    cx, cy = nx / 8.0, ny / 8.0
    hx, hy = nx / 8.0, ny / 8.0
    square = (np.abs(x - cx) < hx) & (np.abs(y - cy) < hy)
    image[square] = 0.0
    return image


def noise_variance(level):
    """Resolve a named regime ('low'/'medium'/'high') or a number to a variance."""
    if isinstance(level, str):
        try:
            return NOISE_LEVELS[level]
        except KeyError:
            raise ValueError(f"unknown noise regime {level!r}; choose from {sorted(NOISE_LEVELS)}") from None
    return float(level)


def add_noise(sino, variance, seed=None, rng=None):
    """Add i.i.d. zero-mean Gaussian noise of the given variance.

    Pass either ``seed`` (uses the package's noise stream) or an explicit
    ``rng``.
    """
    variance = float(variance)
    if not variance >= 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    sino = np.asarray(sino, dtype=np.float64)
    if variance == 0:
        return sino.copy()
    if rng is None:
        rng = make_rng(0 if seed is None else seed, "noise")
    return sino + np.sqrt(variance) * rng.standard_normal(sino.shape)
