"""Non-learned baselines: 2D FBP, 3D FDK and SIRT."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .exceptions import DivergenceError, ShapeError
from .geometry import ConeBeamGeometry, ParallelGeometry2D
from .projector import get_projector

__all__ = [
    "FilterSpec",
    "SirtConfig",
    "ramp_filter",
    "filter_rows",
    "fbp_2d",
    "fdk_3d",
    "operator_norm",
    "sirt",
]


@dataclass(frozen=True)
class FilterSpec:
    """Reconstruction filter: ``ramp``, ``hann`` (ramp times Hann window) or ``none``.

    ``cutoff`` is the fraction of the Nyquist frequency at which the Hann
    window reaches zero.
    """

    kind: str = "ramp"
    cutoff: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ramp", "hann", "none"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if not 0 < self.cutoff <= 1:
            raise ValueError(f"cutoff must be in (0, 1], got {self.cutoff}")


def _padded_length(n):
    return int(2 ** np.ceil(np.log2(max(2 * n, 2))))


def ramp_filter(n, spacing, spec=FilterSpec()):
    """Frequency response of the (windowed) ramp filter for rows of ``n`` samples.

    Built from the band-limited spatial kernel ``h[0] = 1/(4 tau^2)``,
    ``h[k odd] = -1/(pi k tau)^2`` so the DC term is not lost to
    discretisation. Length is the next power of two >= ``2 n``.
    """
    size = _padded_length(n)
    k = np.fft.fftfreq(size, d=1.0 / size)
    h = np.zeros(size)
    h[0] = 1.0 / (4.0 * spacing ** 2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    response = np.real(np.fft.fft(h)) * spacing
    if spec.kind == "hann":
        f = np.abs(np.fft.fftfreq(size))  # cycles per sample, Nyquist = 0.5
        rel = f / (0.5 * spec.cutoff)
        response = response * np.where(rel <= 1.0, 0.5 * (1.0 + np.cos(np.pi * rel)), 0.0)
    return response


def filter_rows(rows, spacing, spec=FilterSpec()):
    """Filter along the last axis in the frequency domain with zero padding."""
    if spec.kind == "none":
        return np.array(rows, dtype=np.float64)
    n = rows.shape[-1]
    response = ramp_filter(n, spacing, spec)
    spectrum = np.fft.fft(rows, n=response.size, axis=-1)
    return np.real(np.fft.ifft(spectrum * response, axis=-1))[..., :n]


def fbp_2d(y, geo, grid, spec=FilterSpec()):
    """Filtered backprojection for a full-circle parallel-beam sinogram."""
    if not isinstance(geo, ParallelGeometry2D) or grid.ndim != 2:
        raise ShapeError("fbp_2d needs a parallel-beam geometry and a 2D grid")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != geo.sino_shape:
        raise ShapeError(f"sinogram shape {y.shape} != {geo.sino_shape}")
    q = filter_rows(y, geo.det_pitch, spec)
    x, yy = grid.coords()
    u_det = geo.det_coords()
    out = np.zeros(grid.dims)
    for a, beta in enumerate(geo.angles):
        u = -np.sin(beta) * x + np.cos(beta) * yy
        out += np.interp(u, u_det, q[a], left=0.0, right=0.0)
    # 360 degrees of data cover every line twice
    return out * (np.pi / geo.n_angles)


def fdk_3d(y, geo, grid, spec=FilterSpec()):
    """Feldkamp-Davis-Kress reconstruction for a full circular orbit."""
    if not isinstance(geo, ConeBeamGeometry) or grid.ndim != 3:
        raise ShapeError("fdk_3d needs a cone-beam geometry and a 3D grid")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != geo.sino_shape:
        raise ShapeError(f"sinogram shape {y.shape} != {geo.sino_shape}")
    mag = geo.sdd / geo.sad
    # detector coordinates scaled back to the isocenter plane
    u_iso = geo.det_u() / mag
    v_iso = geo.det_v() / mag
    vv, uu = np.meshgrid(v_iso, u_iso, indexing="ij")
    cos_weight = geo.sad / np.sqrt(geo.sad ** 2 + uu ** 2 + vv ** 2)
    q = filter_rows(y * cos_weight, geo.det_pitch / mag, spec)

    x, yy, z = grid.coords()
    pitch_iso = geo.det_pitch / mag
    out = np.zeros(grid.dims)
    for a, beta in enumerate(geo.angles):
        c, s = np.cos(beta), np.sin(beta)
        depth = geo.sad - (x * c + yy * s)  # distance from source along the central ray
        scale = geo.sad / depth
        u = (-s * x + c * yy) * scale
        v = z * scale
        row = v / pitch_iso + (geo.det_rows - 1) / 2.0
        col = u / pitch_iso + (geo.det_cols - 1) / 2.0
        vals = map_coordinates(q[a], [row.ravel(), col.ravel()], order=1, mode="constant", cval=0.0)
        out += scale ** 2 * vals.reshape(grid.dims)
    return out * (np.pi / geo.n_angles)


def operator_norm(proj, n_iter=30, seed=0):
    """Power-iteration estimate of the spectral norm of ``A``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(proj.grid.dims)
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(n_iter):
        z = proj.adjoint(proj.forward(x))
        sigma2 = np.linalg.norm(z)
        if sigma2 == 0:
            return 0.0
        x = z / sigma2
    return float(np.sqrt(sigma2))


@dataclass(frozen=True)
class SirtConfig:
    """``variant`` is ``scaled`` (C/R preconditioned) or ``fixed_step``.

    For ``fixed_step`` a ``step`` of None means ``1.8 / ||A||^2``.
    """

    variant: str = "scaled"
    n_iter: int = 100
    step: float = None

    def __post_init__(self):
        if self.variant not in ("scaled", "fixed_step"):
            raise ValueError(f"unknown SIRT variant {self.variant!r}")
        if int(self.n_iter) != self.n_iter or self.n_iter < 1:
            raise ValueError(f"n_iter must be a positive integer, got {self.n_iter}")
        if self.step is not None and not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")


def sirt(y, geo, grid, cfg=SirtConfig(), callback=None, x0=None):
    """Run SIRT from ``x0`` (zero by default) for ``cfg.n_iter`` iterations.

    ``callback(k, x)`` is called after every iteration. Raises
    ``DivergenceError`` if the residual grows more than tenfold within ten
    iterations.
    """
    proj = get_projector(geo, grid)
    y = np.asarray(y, dtype=np.float64)
    x = grid.zeros() if x0 is None else np.array(x0, dtype=np.float64)
    if cfg.variant == "scaled":
        sc = proj.scalings()
    else:
        step = cfg.step
        if step is None:
            step = 1.8 / operator_norm(proj) ** 2
    history = []
    for k in range(cfg.n_iter):
        r = y - proj.forward(x)
        res = float(np.linalg.norm(r))
        history.append(res)
        if len(history) > 10 and res > 10.0 * history[-11]:
            raise DivergenceError(f"SIRT diverged at iteration {k}: residual {res:.3g}")
        if not np.isfinite(res):
            raise DivergenceError(f"SIRT produced non-finite residual at iteration {k}")
        if cfg.variant == "scaled":
            x = x + sc.col_inv * proj.adjoint(sc.row_inv * r)
        else:
            x = x + step * proj.adjoint(r)
        if callback is not None:
            callback(k + 1, x)
    return x
