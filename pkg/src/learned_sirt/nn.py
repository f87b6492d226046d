"""Minimal differentiable CNN used as the learned prior.

Only what the learned update needs: zero-padded 3x3 (or 3x3x3)
convolutions, per-channel PReLU, a two-block network with a linear
convolutional head, Kaiming initialisation, Adam and the log-MSE loss.

Tensors are channels-first without a batch axis: ``(C, *spatial)``.
Gradients come from an explicit tape recorded by :func:`forward`.
"""

import functools

import numpy as np

from .exceptions import NumericError, ShapeError, TapeError
from .rng import make_rng

__all__ = [
    "Model",
    "Tape",
    "AdamState",
    "conv_forward",
    "conv_backward",
    "prelu_forward",
    "prelu_backward",
    "forward",
    "backward",
    "kaiming_init",
    "loss_and_grad",
    "adam_step",
    "RECEPTIVE_RADIUS",
    "LOSS_FLOOR",
]

KERNEL = 3
HIDDEN = 32
RECEPTIVE_RADIUS = 3  # three 3-wide convolutions
LOSS_FLOOR = 1e-12
# BLAS picks different kernels for ragged matrix edges, which changes the
# rounding of edge columns. Multiplying fixed-width zero-padded blocks gives
# every voxel the same arithmetic whatever the input size, so tiled and
# monolithic forward passes agree bitwise.
GEMM_BLOCK = 256


@functools.lru_cache(maxsize=None)
def _offsets(ndim):
    grids = np.meshgrid(*[np.arange(KERNEL)] * ndim, indexing="ij")
    return tuple(tuple(int(v) for v in row) for row in np.stack([g.ravel() for g in grids], axis=1))


def _im2col(x):
    """Columns of all 3^d neighbourhoods of a zero-padded ``(C, *S)`` input.

    Returns ``(C * 3^d, N)`` with rows ordered channel-major, then kernel
    offset, matching ``weight.reshape(c_out, -1)``.
    """
    c = x.shape[0]
    spatial = x.shape[1:]
    xp = np.pad(x, [(0, 0)] + [(1, 1)] * len(spatial))
    offs = _offsets(len(spatial))
    cols = np.empty((c, len(offs)) + spatial, dtype=x.dtype)
    for k, off in enumerate(offs):
        cols[:, k] = xp[(slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, spatial))]
    return cols.reshape(c * len(offs), -1)


def _col2im(cols, c, spatial):
    offs = _offsets(len(spatial))
    cols = cols.reshape((c, len(offs)) + tuple(spatial))
    xp = np.zeros((c,) + tuple(n + 2 for n in spatial), dtype=cols.dtype)
    for k, off in enumerate(offs):
        xp[(slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, spatial))] += cols[:, k]
    return xp[(slice(None),) + tuple(slice(1, n + 1) for n in spatial)]


def _blocked_matmul(w, cols):
    n = cols.shape[1]
    out = np.empty((w.shape[0], n), dtype=np.result_type(w, cols))
    buf = np.empty((cols.shape[0], GEMM_BLOCK), dtype=cols.dtype)
    for start in range(0, n, GEMM_BLOCK):
        m = min(GEMM_BLOCK, n - start)
        buf[:, :m] = cols[:, start:start + m]
        buf[:, m:] = 0
        out[:, start:start + m] = (w @ buf)[:, :m]
    return out


def conv_forward(x, weight, bias):
    """Zero-padded stride-1 convolution (cross-correlation). Returns ``(y, cols)``."""
    spatial = x.shape[1:]
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv expects {weight.shape[1]} input channels, got {x.shape[0]}")
    if min(spatial) < KERNEL:
        raise ShapeError(f"spatial size must be >= {KERNEL} on every axis, got {spatial}")
    cols = _im2col(x)
    y = _blocked_matmul(weight.reshape(weight.shape[0], -1), cols)
    y += bias[:, None]
    return y.reshape((weight.shape[0],) + spatial), cols


def conv_backward(grad_out, cols, weight, in_shape):
    """Gradients of a convolution w.r.t. its input, weight and bias."""
    c_out = weight.shape[0]
    g = grad_out.reshape(c_out, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    grad_cols = weight.reshape(c_out, -1).T @ g
    grad_x = _col2im(grad_cols, in_shape[0], in_shape[1:])
    return grad_x, grad_w, grad_b


def _bcast(slope, ndim):
    return slope.reshape((-1,) + (1,) * ndim)


def prelu_forward(x, slope):
    s = _bcast(slope, x.ndim - 1)
    return np.where(x > 0, x, s * x)


def prelu_backward(grad_out, x, slope):
    s = _bcast(slope, x.ndim - 1)
    pos = x > 0
    grad_x = np.where(pos, grad_out, s * grad_out)
    axes = tuple(range(1, x.ndim))
    grad_slope = np.where(pos, 0.0, x * grad_out).sum(axis=axes)
    return grad_x, grad_slope.astype(slope.dtype)


class Model:
    """Two conv+PReLU blocks (32 channels) followed by a linear conv head.

    ``c_in``/``c_out`` are 3/2 for the learned update with history and
    1/1 for the variant that only sees the current iterate.
    """

    PARAM_NAMES = ("w1", "b1", "a1", "w2", "b2", "a2", "w3", "b3")

    def __init__(self, c_in=3, c_out=2, ndim=2, dtype=np.float32):
        if ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {ndim}")
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.ndim = int(ndim)
        self.dtype = np.dtype(dtype)
        k = (KERNEL,) * ndim
        shapes = {
            "w1": (HIDDEN, c_in) + k, "b1": (HIDDEN,), "a1": (HIDDEN,),
            "w2": (HIDDEN, HIDDEN) + k, "b2": (HIDDEN,), "a2": (HIDDEN,),
            "w3": (c_out, HIDDEN) + k, "b3": (c_out,),
        }
        self.params = {name: np.zeros(shapes[name], dtype=self.dtype) for name in self.PARAM_NAMES}
        self.params["a1"][:] = 0.25
        self.params["a2"][:] = 0.25

    def __getitem__(self, name):
        return self.params[name]

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def param_list(self):
        return [self.params[n] for n in self.PARAM_NAMES]

    def copy(self, dtype=None):
        other = Model(self.c_in, self.c_out, self.ndim, dtype or self.dtype)
        for n in self.PARAM_NAMES:
            other.params[n][...] = self.params[n]
        return other

    def __call__(self, x):
        return forward(self, x, record=False)[0]


class Tape:
    """Activations recorded by :func:`forward`; consumed once by :func:`backward`."""

    def __init__(self, model, in_shape, cols, pre):
        self.model = model
        self.in_shape = in_shape
        self.cols = cols
        self.pre = pre
        self.used = False


def forward(model, x, record=True):
    """Apply the network to a ``(c_in, *spatial)`` array.

    Returns ``(output, tape)``; ``tape`` is None when ``record`` is False.
    """
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != model.ndim + 1 or x.shape[0] != model.c_in:
        raise ShapeError(f"model expects ({model.c_in}, {model.ndim} spatial axes), got {x.shape}")
    p = model.params
    h1, cols1 = conv_forward(x, p["w1"], p["b1"])
    z1 = prelu_forward(h1, p["a1"])
    h2, cols2 = conv_forward(z1, p["w2"], p["b2"])
    z2 = prelu_forward(h2, p["a2"])
    out, cols3 = conv_forward(z2, p["w3"], p["b3"])
    if not record:
        return out, None
    return out, Tape(model, x.shape, (cols1, cols2, cols3), (h1, h2))


def backward(tape, grad_out):
    """Backpropagate ``grad_out`` through a recorded forward pass.

    Returns ``(grad_input, grads)`` with ``grads`` keyed like ``model.params``.
    """
    if tape.used:
        raise TapeError("tape already consumed by a previous backward call")
    tape.used = True
    p = tape.model.params
    cols1, cols2, cols3 = tape.cols
    h1, h2 = tape.pre
    grad_out = np.asarray(grad_out, dtype=tape.model.dtype)
    if grad_out.shape != (tape.model.c_out,) + tape.in_shape[1:]:
        raise ShapeError(f"output gradient shape {grad_out.shape} does not match the forward pass")
    grads = {}
    g, grads["w3"], grads["b3"] = conv_backward(grad_out, cols3, p["w3"], h2.shape)
    g, grads["a2"] = prelu_backward(g, h2, p["a2"])
    g, grads["w2"], grads["b2"] = conv_backward(g, cols2, p["w2"], h1.shape)
    g, grads["a1"] = prelu_backward(g, h1, p["a1"])
    g, grads["w1"], grads["b1"] = conv_backward(g, cols1, p["w1"], tape.in_shape)
    tape.cols = tape.pre = None
    return g, grads


def kaiming_init(model, seed):
    """Weights ~ N(0, 2 / fan_in), biases 0, PReLU slopes 0.25 (in place)."""
    rng = make_rng(seed, "init")
    for name in ("w1", "w2", "w3"):
        w = model.params[name]
        fan_in = int(np.prod(w.shape[1:]))
        w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)
    for name in ("b1", "b2", "b3"):
        model.params[name][:] = 0.0
    for name in ("a1", "a2"):
        model.params[name][:] = 0.25
    return model


def loss_and_grad(gamma, x, t, omega=0.04):
    """``log(||g0 - t||^2 + omega ||g1 - (t - x)||^2)`` and its gradient in ``gamma``.

    Norms are sums over voxels. A single-channel ``gamma`` drops the second
    term. The log argument is floored at ``LOSS_FLOOR``; below the floor the
    gradient is zero.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    r0 = gamma[0] - t
    total = float(np.sum(r0 * r0))
    r1 = None
    if gamma.shape[0] > 1:
        r1 = gamma[1] - (t - x)
        total += omega * float(np.sum(r1 * r1))
    grad = np.zeros_like(gamma)
    if total <= LOSS_FLOOR:
        return float(np.log(LOSS_FLOOR)), grad
    grad[0] = 2.0 * r0 / total
    if r1 is not None:
        grad[1] = 2.0 * omega * r1 / total
    return float(np.log(total)), grad


class AdamState:
    """First/second moments and step counter for Adam."""

    def __init__(self, params, beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros_like(p) for n, p in params.items()}
        self.v = {n: np.zeros_like(p) for n, p in params.items()}


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
    return params, state
