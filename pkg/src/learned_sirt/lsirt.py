"""Learned SIRT: the blended update, its training loop and inference.

One iteration is::

    p      = C A^T R (y - A x)
    gamma  = g(x, h, p)            # or g(x) for the history-free variant
    x_next = (1 - alpha) x + alpha gamma[0] + p

where ``h`` is the previous iterate. Training keeps a batch of partially
reconstructed images alive across steps and replaces one element at random
so that every image sees about ``n_total`` iterations, of which the first
``n_warmup`` carry no gradient.
"""

import csv
import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .exceptions import NumericError, ShapeError
from .formats import write_checkpoint
from .phantoms import gen_ellipsoids, gen_triangles
from .projector import get_projector
from .rng import make_rng

__all__ = [
    "LsirtConfig",
    "BatchElement",
    "PhantomDataset",
    "ArrayDataset",
    "make_model",
    "lr_at",
    "lsirt_step",
    "create_batch_element",
    "train",
    "reconstruct",
    "apply_tiled",
]

VARIANTS = ("lsirt", "lsirt-star")


@dataclass
class LsirtConfig:
    alpha: float = 0.1
    n_warmup: int = 50
    n_total: int = 100
    batch_size: int = 8
    n_train_steps: int = 80_000
    omega: float = 0.04
    lr: float = 2e-4
    lr_schedule: str = "paper"
    noise_variance: float = 0.0025
    variant: str = "lsirt"
    patch_size: tuple = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0 <= self.n_warmup < self.n_total:
            raise ValueError(f"need 0 <= n_warmup < n_total, got {self.n_warmup}, {self.n_total}")
        if self.batch_size < 1 or self.n_train_steps < 0:
            raise ValueError("batch_size must be >= 1 and n_train_steps >= 0")
        if self.lr_schedule not in ("paper", "linear", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        if self.patch_size is not None:
            self.patch_size = tuple(int(s) for s in self.patch_size)
            if min(self.patch_size) < 3:
                raise ValueError(f"patch size must be >= 3 per axis, got {self.patch_size}")

    @property
    def channels(self):
        return (3, 2) if self.variant == "lsirt" else (1, 1)

    @property
    def loss_weight(self):
        return self.omega if self.variant == "lsirt" else 0.0

    def to_dict(self):
        d = asdict(self)
        if d["patch_size"] is not None:
            d["patch_size"] = list(d["patch_size"])
        return d


@dataclass
class BatchElement:
    x: np.ndarray
    h: np.ndarray
    y: np.ndarray
    t: np.ndarray
    age: int = 0


class PhantomDataset:
    """Endless stream of random phantoms from a named generator."""

    GENERATORS = {"triangles": gen_triangles, "ellipsoids": gen_ellipsoids}

    def __init__(self, family, dims):
        if family not in self.GENERATORS:
            raise ValueError(f"unknown phantom family {family!r}")
        self.family = family
        self.dims = tuple(dims)

    def sample(self, rng):
        seed = int(rng.integers(0, 2**63))
        return self.GENERATORS[self.family](seed, self.dims)


class ArrayDataset:
    """Uniform sampling from a fixed list of volumes."""

    def __init__(self, volumes):
        self.volumes = [np.asarray(v, dtype=np.float64) for v in volumes]
        if not self.volumes:
            raise ValueError("dataset is empty")

    def sample(self, rng):
        return self.volumes[int(rng.integers(len(self.volumes)))]


def make_model(cfg, ndim, seed=0, dtype=np.float32):
    c_in, c_out = cfg.channels
    return nn.kaiming_init(nn.Model(c_in, c_out, ndim, dtype), seed)


def lr_at(step, cfg):
    """Learning rate for training step ``step`` (0-based).

    ``paper``: base rate for the first half, a quarter of it for the next
    quarter, then linear decay to zero. ``linear``: linear decay from the
    base rate to zero.
    """
    n = max(cfg.n_train_steps, 1)
    f = step / n
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "linear":
        return cfg.lr * max(0.0, 1.0 - f)
    if f < 0.5:
        return cfg.lr
    if f < 0.75:
        return cfg.lr / 4.0
    return cfg.lr / 4.0 * max(0.0, (1.0 - f) / 0.25)


def _network_input(model, x, h, p):
    if model.c_in == 3:
        return np.stack([x, h, p])
    if model.c_in == 1:
        return x[None]
    raise ShapeError(f"model must take 1 or 3 input channels, got {model.c_in}")


def _blend(x, gamma0, p, alpha):
    x_next = (1.0 - alpha) * x + alpha * gamma0 + p
    if not np.all(np.isfinite(x_next)):
        raise NumericError("non-finite values in the learned SIRT iterate")
    return x_next


def _run_model(model, inp, tile=None):
    if tile is None:
        return model(inp)
    return apply_tiled(model, inp, tile)


def lsirt_step(x, h, y, model, proj, alpha, sc=None, tile=None):
    """One learned SIRT iteration. Returns ``(x_next, gamma)``."""
    p = proj.scaled_gradient(x, y, sc)
    gamma = _run_model(model, _network_input(model, x, h, p), tile).astype(np.float64)
    return _blend(x, gamma[0], p, alpha), gamma


def create_batch_element(dataset, rng, model, cfg, proj, noise_rng=None):
    """Fresh element: ``x = h = 0``, noisy data, then ``n_warmup`` untracked steps."""
    chi = dataset.sample(rng)
    if chi.shape != proj.grid.dims:
        raise ShapeError(f"dataset volume {chi.shape} does not match grid {proj.grid.dims}")
    y = proj.forward(chi)
    if cfg.noise_variance > 0:
        noise_rng = rng if noise_rng is None else noise_rng
        y = y + np.sqrt(cfg.noise_variance) * noise_rng.standard_normal(y.shape)
    x = proj.grid.zeros()
    h = proj.grid.zeros()
    sc = proj.scalings()
    for _ in range(cfg.n_warmup):
        x_next, _ = lsirt_step(x, h, y, model, proj, cfg.alpha, sc)
        h, x = x, x_next
    return BatchElement(x=x, h=h, y=y, t=chi, age=cfg.n_warmup)


def _random_patch(rng, dims, patch):
    """Corner of a patch on the patch-size lattice; the last cell is shifted inside."""
    corner = []
    for n, s in zip(dims, patch):
        k = int(rng.integers(0, -(-n // s)))
        corner.append(min(k * s, n - s))
    return tuple(corner)


def _train_element(el, model, proj, sc, cfg, rng, scale):
    """Advance one element by a gradient-bearing step; return ``(loss, grads)``."""
    p = proj.scaled_gradient(el.x, el.y, sc)
    inp = _network_input(model, el.x, el.h, p)
    omega = cfg.loss_weight
    if cfg.patch_size is None:
        gamma, tape = nn.forward(model, inp)
        gamma = gamma.astype(np.float64)
        loss, g = nn.loss_and_grad(gamma, el.x, el.t, omega)
    else:
        # The projector term needs the whole volume; the loss only sees one patch.
        gamma = model(inp).astype(np.float64)
        corner = _random_patch(rng, el.x.shape, cfg.patch_size)
        m = nn.RECEPTIVE_RADIUS
        lo = [max(c - m, 0) for c in corner]
        hi = [min(c + s + m, n) for c, s, n in zip(corner, cfg.patch_size, el.x.shape)]
        region = tuple(slice(a, b) for a, b in zip(lo, hi))
        inner = tuple(slice(c - a, c - a + s) for c, a, s in zip(corner, lo, cfg.patch_size))
        target = tuple(slice(c, c + s) for c, s in zip(corner, cfg.patch_size))
        gamma_region, tape = nn.forward(model, inp[(slice(None),) + region])
        gamma_patch = gamma_region[(slice(None),) + inner].astype(np.float64)
        loss, g_patch = nn.loss_and_grad(gamma_patch, el.x[target], el.t[target], omega)
        g = np.zeros(gamma_region.shape)
        g[(slice(None),) + inner] = g_patch
    _, grads = nn.backward(tape, g * scale)
    el.h, el.x = el.x, _blend(el.x, gamma[0], p, cfg.alpha)
    el.age += 1
    return loss, grads


class _RunLog:
    """Run directory: resolved config, metrics CSV and checkpoints."""

    def __init__(self, run_dir, cfg, extra):
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as f:
            json.dump({"lsirt": cfg.to_dict(), **extra}, f, indent=2, sort_keys=True)
        self._csv = open(os.path.join(run_dir, "metrics.csv"), "w", newline="")
        self._writer = csv.writer(self._csv)
        self._writer.writerow(["step", "loss", "lr", "wall_time"])
        self._t0 = time.perf_counter()

    def log(self, step, loss, lr):
        self._writer.writerow([step, repr(loss), repr(lr), f"{time.perf_counter() - self._t0:.3f}"])

    def checkpoint(self, name, model, adam):
        write_checkpoint(os.path.join(self.run_dir, name), model, adam)

    def close(self):
        self._csv.close()


def train(dataset, geo, grid, cfg, seed=0, model=None, run_dir=None, run_info=None, callback=None):
    """Train the learned update. Returns ``(model, history)``.

    ``history`` lists ``(step, mean batch loss, lr)``. When ``run_dir`` is
    given, a config snapshot, ``metrics.csv`` and checkpoints (every
    ``cfg.checkpoint_every`` steps plus ``final.ckpt``) are written there.
    """
    proj = get_projector(geo, grid)
    sc = proj.scalings()
    if model is None:
        model = make_model(cfg, grid.ndim, seed)
    if (model.c_in, model.c_out) != cfg.channels:
        raise ShapeError(f"model channels {(model.c_in, model.c_out)} do not fit variant {cfg.variant}")
    adam = nn.AdamState(model.params)
    rng = make_rng(seed, "train")
    counter = 0

    def fresh():
        nonlocal counter
        el = create_batch_element(dataset, make_rng(seed, "phantom", counter), model, cfg, proj,
                                  noise_rng=make_rng(seed, "noise", counter))
        counter += 1
        return el

    log = _RunLog(run_dir, cfg, run_info or {}) if run_dir else None
    history = []
    try:
        if cfg.n_train_steps == 0:
            return model, history
        batch = [fresh() for _ in range(cfg.batch_size)]
        replace_prob = min(1.0, cfg.batch_size / (cfg.n_total - cfg.n_warmup))
        scale = 1.0 / cfg.batch_size
        for step in range(cfg.n_train_steps):
            if rng.random() < replace_prob:
                batch[int(rng.integers(cfg.batch_size))] = fresh()
            total = None
            losses = []
            for el in batch:
                try:
                    loss, grads = _train_element(el, model, proj, sc, cfg, rng, scale)
                except NumericError as err:
                    raise NumericError(f"training step {step}: {err}") from err
                losses.append(loss)
                if total is None:
                    total = grads
                else:
                    for k in total:
                        total[k] = total[k] + grads[k]
            lr = lr_at(step, cfg)
            try:
                nn.adam_step(model.params, total, adam, lr)
            except NumericError as err:
                raise NumericError(f"training step {step}: {err}") from err
            mean_loss = float(np.mean(losses))
            history.append((step, mean_loss, lr))
            if log:
                log.log(step, mean_loss, lr)
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    log.checkpoint(f"step_{step + 1:07d}.ckpt", model, adam)
            if callback is not None:
                callback(step, mean_loss, lr)
    finally:
        if log:
            log.checkpoint("final.ckpt", model, adam)
            log.close()
    return model, history


def reconstruct(y, geo, grid, model, cfg, n_iter=None, snapshots=(), tile=None):
    """Run ``n_iter`` (default ``cfg.n_total``) learned iterations from zero.

    Returns ``(x, snaps)`` where ``snaps`` maps each requested iteration
    count to a copy of the iterate at that point.
    """
    if model.ndim != grid.ndim:
        raise ShapeError(f"{model.ndim}D model cannot reconstruct a {grid.ndim}D grid")
    proj = get_projector(geo, grid)
    sc = proj.scalings()
    y = np.asarray(y, dtype=np.float64)
    n_iter = cfg.n_total if n_iter is None else int(n_iter)
    wanted = set(int(s) for s in snapshots)
    x = grid.zeros()
    h = grid.zeros()
    snaps = {}
    for k in range(1, n_iter + 1):
        x_next, _ = lsirt_step(x, h, y, model, proj, cfg.alpha, sc, tile)
        h, x = x, x_next
        if k in wanted:
            snaps[k] = x.copy()
    return x, snaps


def apply_tiled(model, inp, tile, margin=nn.RECEPTIVE_RADIUS):
    """Evaluate the network tile by tile with overlapping margins.

    Each tile is extended by ``margin`` voxels (clipped at the volume
    border), evaluated, and cropped back, so the result equals a single
    forward pass over the whole input.
    """
    spatial = inp.shape[1:]
    if np.isscalar(tile):
        tile = (int(tile),) * len(spatial)
    tile = tuple(min(int(t), n) for t, n in zip(tile, spatial))
    if margin < nn.RECEPTIVE_RADIUS:
        raise ValueError(f"margin must be >= {nn.RECEPTIVE_RADIUS}, got {margin}")
    if any(t < 2 * margin + 1 and t < n for t, n in zip(tile, spatial)):
        raise ValueError(f"tile {tile} too small for margin {margin}")
    out = np.empty((model.c_out,) + spatial, dtype=model.dtype)
    starts = [range(0, n, t) for n, t in zip(spatial, tile)]
    for corner in np.stack(np.meshgrid(*starts, indexing="ij"), -1).reshape(-1, len(spatial)):
        lo = [max(c - margin, 0) for c in corner]
        hi = [min(c + t + margin, n) for c, t, n in zip(corner, tile, spatial)]
        piece = model(inp[(slice(None),) + tuple(slice(a, b) for a, b in zip(lo, hi))])
        ends = [min(c + t, n) for c, t, n in zip(corner, tile, spatial)]
        inner = tuple(slice(c - a, e - a) for c, a, e in zip(corner, lo, ends))
        out[(slice(None),) + tuple(slice(c, e) for c, e in zip(corner, ends))] = \
            piece[(slice(None),) + inner]
    return out
