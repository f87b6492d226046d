"""Image quality metrics: PSNR, SSIM, CNR, edge-spread FWHM and DFT views."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates, uniform_filter
from scipy.special import ndtr

from .exceptions import FitError, ShapeError

__all__ = [
    "RoiSpec",
    "EdgeFit",
    "psnr",
    "ssim",
    "roi_mask",
    "cnr",
    "radial_profile",
    "fit_edge",
    "edge_fwhm",
    "line_spread",
    "dft_magnitude_slice",
    "double_wedge_fraction",
    "PLANES",
    "FWHM_PER_SIGMA",
    "HU_DATA_RANGE",
]

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
HU_DATA_RANGE = 2.0  # 2000 HU in internal (HU x 1e-3) units
SSIM_WINDOW = 7


def _same_shape(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, data_range=None):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs.

    ``data_range`` defaults to ``max(ref) - min(ref)``.
    """
    x, ref = _same_shape(x, ref)
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(x, ref, data_range=HU_DATA_RANGE, win_size=SSIM_WINDOW):
    """Mean structural similarity with a uniform ``win_size`` window (2D or 3D).

    Local statistics use the unbiased covariance estimate; the border of
    half a window is excluded from the mean.
    """
    x, ref = _same_shape(x, ref)
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    if min(x.shape) < win_size:
        raise ShapeError(f"image {x.shape} smaller than the {win_size}-wide SSIM window")
    n = win_size ** x.ndim
    cov_norm = n / (n - 1.0)
    ux = uniform_filter(x, win_size)
    uy = uniform_filter(ref, win_size)
    uxx = uniform_filter(x * x, win_size)
    uyy = uniform_filter(ref * ref, win_size)
    uxy = uniform_filter(x * ref, win_size)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    s = num / den
    pad = (win_size - 1) // 2
    inner = tuple(slice(pad, n_ - pad) for n_ in x.shape)
    return float(s[inner].mean())


@dataclass(frozen=True)
class RoiSpec:
    """Cylinder (disk in 2D) or box region, in mm from the grid center.

    A cylinder uses ``radius``, ``axis`` and an optional ``half_length``
    (unbounded when None); a box uses ``half_extents``.
    """

    shape: str
    center: tuple
    radius: float = None
    half_extents: tuple = None
    axis: tuple = (0.0, 0.0, 1.0)
    half_length: float = None

    def __post_init__(self):
        if self.shape == "cylinder":
            if self.radius is None or not self.radius > 0:
                raise ValueError("cylinder ROI needs a positive radius")
        elif self.shape == "box":
            if self.half_extents is None or min(self.half_extents) <= 0:
                raise ValueError("box ROI needs positive half extents")
        else:
            raise ValueError(f"unknown ROI shape {self.shape!r}")


def roi_mask(roi, grid):
    coords = grid.coords()
    rel = [c - float(c0) for c, c0 in zip(coords, roi.center)]
    if roi.shape == "box":
        mask = np.ones(grid.dims, dtype=bool)
        for r, h in zip(rel, roi.half_extents):
            mask &= np.abs(r) <= h
        return mask
    if grid.ndim == 2:
        return rel[0] ** 2 + rel[1] ** 2 <= roi.radius ** 2
    axis = np.asarray(roi.axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    along = rel[0] * axis[0] + rel[1] * axis[1] + rel[2] * axis[2]
    perp2 = rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2 - along ** 2
    mask = perp2 <= roi.radius ** 2
    if roi.half_length is not None:
        mask &= np.abs(along) <= roi.half_length
    return mask


def cnr(vol, insert, surround, grid=None):
    """Contrast-to-noise ratio ``|m_i - m_s| / sqrt(s_i^2 + s_s^2)``.

    Surround statistics are pooled over all ``surround`` regions.
    """
    from .geometry import GridSpec

    vol = np.asarray(vol, dtype=np.float64)
    grid = GridSpec(vol.shape) if grid is None else grid
    if isinstance(surround, RoiSpec):
        surround = [surround]
    m_in = roi_mask(insert, grid)
    m_out = np.zeros(grid.dims, dtype=bool)
    for roi in surround:
        m = roi_mask(roi, grid)
        if (m & m_in).any() or (m & m_out).any():
            raise ValueError("CNR regions must be disjoint")
        m_out |= m
    if not m_in.any() or not m_out.any():
        raise ValueError("CNR regions must contain at least one voxel")
    a, b = vol[m_in], vol[m_out]
    return abs(a.mean() - b.mean()) / math.sqrt(a.var() + b.var())


@dataclass(frozen=True)
class EdgeFit:
    """Cumulative-normal edge ``low/high`` levels, location ``mu`` and spread ``sigma`` (mm)."""

    mu: float
    sigma: float
    low: float
    high: float
    inner: float
    outer: float
    residual: float


def radial_profile(image, center, max_radius, pitch=1.0, dr=0.25, dtheta_deg=1.0):
    """Angle-averaged profile around ``center`` (mm) by bilinear polar resampling."""
    image = np.asarray(image, dtype=np.float64)
    r = np.arange(0.0, max_radius + 1e-9, dr)
    theta = np.deg2rad(np.arange(0.0, 360.0, dtheta_deg))
    rr, tt = np.meshgrid(r, theta, indexing="ij")
    idx = []
    for axis, (c0, trig) in enumerate(zip(center, (np.cos(tt), np.sin(tt)))):
        n = image.shape[axis]
        idx.append((c0 + rr * trig) / pitch + (n - 1) / 2.0)
    samples = map_coordinates(image, [i.ravel() for i in idx], order=1, mode="nearest")
    return r, samples.reshape(rr.shape).mean(axis=1)


def _edge_model(params, r):
    a, b, mu, sigma = params
    z = (r - mu) / sigma
    phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    f = a + b * ndtr(z)
    jac = np.stack([np.ones_like(r), ndtr(z), -b * phi / sigma, -b * phi * z / sigma], axis=1)
    return f, jac


def fit_edge(r, profile, max_iter=200, tol=1e-12):
    """Least-squares fit of ``a + b * Phi((r - mu) / sigma)`` by damped Gauss-Newton.

    Starts from the 10%/90% crossings of the normalised profile.
    """
    r = np.asarray(r, dtype=np.float64)
    profile = np.asarray(profile, dtype=np.float64)
    a0, a1 = profile[0], profile[-1]
    if a1 == a0:
        raise FitError("profile has no edge")
    norm = (profile - a0) / (a1 - a0)

    def crossing(level):
        i = int(np.argmax(norm >= level))
        if i == 0:
            return r[0]
        f0, f1 = norm[i - 1], norm[i]
        return r[i - 1] + (level - f0) / (f1 - f0) * (r[i] - r[i - 1])

    r10, r50, r90 = crossing(0.1), crossing(0.5), crossing(0.9)
    sigma0 = max((r90 - r10) / (2 * 1.2815515655446004), (r[1] - r[0]) / 4)
    params = np.array([a0, a1 - a0, r50, sigma0])
    damping = 1e-3
    f, jac = _edge_model(params, r)
    cost = float(np.sum((profile - f) ** 2))
    # below this the cost is rounding noise and relative progress is meaningless
    floor = 1e-24 * float(np.sum(profile ** 2))
    for _ in range(max_iter):
        res = profile - f
        jtj = jac.T @ jac
        step = np.linalg.solve(jtj + damping * np.diag(np.diag(jtj) + 1e-30), jac.T @ res)
        trial = params + step
        trial[3] = abs(trial[3]) if trial[3] != 0 else params[3] / 2
        f_new, jac_new = _edge_model(trial, r)
        cost_new = float(np.sum((profile - f_new) ** 2))
        if cost_new <= cost:
            converged = cost - cost_new <= tol * max(cost, floor, 1e-300) or np.all(
                np.abs(step) <= 1e-10 * (np.abs(params) + 1e-10))
            params, f, jac, cost = trial, f_new, jac_new, cost_new
            damping = max(damping / 10, 1e-12)
            if converged:
                break
        else:
            damping *= 10
            if damping > 1e12:
                break
    else:
        raise FitError("edge fit did not converge", residual=math.sqrt(cost / r.size))
    a, b, mu, sigma = params
    if not (np.isfinite(params).all() and sigma > 0):
        raise FitError("edge fit produced invalid parameters", residual=math.sqrt(cost / r.size))
    return EdgeFit(mu=float(mu), sigma=float(sigma), low=float(min(a, a + b)),
                   high=float(max(a, a + b)), inner=float(a), outer=float(a + b),
                   residual=math.sqrt(cost / r.size))


def line_spread(fit, r):
    """Derivative of the fitted edge response (the line spread function)."""
    z = (np.asarray(r) - fit.mu) / fit.sigma
    return (fit.outer - fit.inner) * np.exp(-0.5 * z * z) / (fit.sigma * math.sqrt(2 * math.pi))


def edge_fwhm(vol, roi, center=None, pitch=1.0):
    """Fit the radial edge around ``center`` inside ``roi``; return ``(EdgeFit, fwhm_mm)``.

    For 3D volumes the axial slice through ``center`` is used. The polar
    sampling radius is the ROI radius (or smallest box half extent).
    """
    vol = np.asarray(vol, dtype=np.float64)
    center = tuple(roi.center if center is None else center)
    image = vol
    if vol.ndim == 3:
        k = int(round(center[2] / pitch + (vol.shape[2] - 1) / 2.0))
        if not 0 <= k < vol.shape[2]:
            raise ShapeError("edge center lies outside the volume")
        image = vol[:, :, k]
    max_radius = roi.radius if roi.shape == "cylinder" else min(roi.half_extents[:2])
    r, profile = radial_profile(image, center[:2], max_radius, pitch)
    fit = fit_edge(r, profile)
    return fit, FWHM_PER_SIGMA * fit.sigma


PLANES = {"sagittal": 0, "coronal": 1, "axial": 2}


def dft_magnitude_slice(vol, plane, index):
    """``log(1 + |DFT|)`` of one slice with zero frequency in the middle.

    ``axial`` fixes z, ``coronal`` fixes y and ``sagittal`` fixes x.
    """
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim != 3:
        raise ShapeError("dft_magnitude_slice needs a 3D volume")
    if plane not in PLANES:
        raise ValueError(f"plane must be one of {sorted(PLANES)}")
    axis = PLANES[plane]
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"slice index {index} out of range for axis of size {vol.shape[axis]}")
    sl = np.take(vol, index, axis=axis)
    return np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(sl))))


def double_wedge_fraction(image, half_angle_deg=20.0, axis=1):
    """Share of non-DC spectral energy inside a double wedge around one frequency axis.

    The wedge holds frequencies within ``half_angle_deg`` of the ``axis``
    frequency axis (for a coronal ``(x, z)`` slice, ``axis=1`` is k_z,
    where a circular orbit leaves its missing cone).
    """
    image = np.asarray(image, dtype=np.float64)
    power = np.abs(np.fft.fft2(image)) ** 2
    k = np.meshgrid(*[np.fft.fftfreq(n) for n in image.shape], indexing="ij")
    k_axis = np.abs(k[axis])
    k_other = np.abs(k[1 - axis])
    nonzero = (k_axis > 0) | (k_other > 0)
    wedge = nonzero & (k_other <= np.tan(np.deg2rad(half_angle_deg)) * k_axis)
    total = power[nonzero].sum()
    if total == 0:
        return 0.0
    return float(power[wedge].sum() / total)
