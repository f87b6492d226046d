"""Binary file formats for volumes, sinograms and model checkpoints.

All multi-byte fields are little-endian and payloads are float32 in C order.

Volume (``TVOL``)::

    magic  4s   b"TVOL"
    version u16
    ndim    u8  2 or 3
    dims    3 x u32 (unused trailing dims are 1)
    pitch   f32 mm
    scale   u8  0 = raw, 1 = HU x 1e-3
    payload f32[prod(dims)]

Sinogram (``TSIN``)::

    magic  4s   b"TSIN"
    version u16
    nbytes  u32  length of the JSON geometry block
    block   utf-8 JSON {"geometry": {...}, "grid": {...}}
    payload f32, angle-major

Checkpoint (``LSCK``)::

    magic  4s   b"LSCK"
    version u16
    c_in, c_out, ndim, has_adam  4 x u8
    parameters f32, in Model.PARAM_NAMES order
    if has_adam: step u64, then first moments, then second moments (f32)
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec, geometry_from_dict, geometry_to_dict, grid_from_dict, grid_to_dict
from .nn import AdamState, Model

__all__ = [
    "SCALE_RAW",
    "SCALE_HU_MILLI",
    "VolumeFile",
    "write_volume",
    "read_volume",
    "write_sinogram",
    "read_sinogram",
    "write_checkpoint",
    "read_checkpoint",
]

VERSION = 1
SCALE_RAW = 0
SCALE_HU_MILLI = 1

_VOL_HEADER = struct.Struct("<4sHB3IfB")
_SIN_HEADER = struct.Struct("<4sHI")
_CKPT_HEADER = struct.Struct("<4sH4B")


class FormatError(OSError):
    """File is not in the expected format."""


@dataclass
class VolumeFile:
    values: np.ndarray
    pitch: float = 1.0
    scale: int = SCALE_RAW

    @property
    def grid(self):
        return GridSpec(self.values.shape, self.pitch)


def _f32_le(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_volume(path, values, pitch=1.0, scale=SCALE_RAW):
    values = np.asarray(values)
    if values.ndim not in (2, 3):
        raise ValueError(f"volume must be 2D or 3D, got shape {values.shape}")
    dims = tuple(values.shape) + (1,) * (3 - values.ndim)
    header = _VOL_HEADER.pack(b"TVOL", VERSION, values.ndim, *dims, pitch, scale)
    with open(path, "wb") as f:
        f.write(header)
        f.write(_f32_le(values))


def read_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _VOL_HEADER.size:
        raise FormatError(f"{path}: truncated volume header")
    magic, version, ndim, d0, d1, d2, pitch, scale = _VOL_HEADER.unpack_from(raw)
    if magic != b"TVOL" or version != VERSION or ndim not in (2, 3):
        raise FormatError(f"{path}: not a version-{VERSION} TVOL file")
    dims = (d0, d1, d2)[:ndim]
    payload = np.frombuffer(raw, dtype="<f4", offset=_VOL_HEADER.size)
    if payload.size != int(np.prod(dims)):
        raise FormatError(f"{path}: payload has {payload.size} values, expected {int(np.prod(dims))}")
    return VolumeFile(payload.reshape(dims).astype(np.float64), float(pitch), int(scale))


def write_sinogram(path, values, geo, grid):
    values = np.asarray(values)
    if values.shape != geo.sino_shape:
        raise ValueError(f"sinogram shape {values.shape} does not match geometry {geo.sino_shape}")
    block = json.dumps({"geometry": geometry_to_dict(geo), "grid": grid_to_dict(grid)},
                       sort_keys=True).encode("utf8")
    with open(path, "wb") as f:
        f.write(_SIN_HEADER.pack(b"TSIN", VERSION, len(block)))
        f.write(block)
        f.write(_f32_le(values))


def read_sinogram(path):
    """Return ``(values, geometry, grid)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _SIN_HEADER.size:
        raise FormatError(f"{path}: truncated sinogram header")
    magic, version, nbytes = _SIN_HEADER.unpack_from(raw)
    if magic != b"TSIN" or version != VERSION:
        raise FormatError(f"{path}: not a version-{VERSION} TSIN file")
    start = _SIN_HEADER.size
    block = json.loads(raw[start:start + nbytes].decode("utf8"))
    geo = geometry_from_dict(block["geometry"])
    grid = grid_from_dict(block["grid"])
    payload = np.frombuffer(raw, dtype="<f4", offset=start + nbytes)
    if payload.size != int(np.prod(geo.sino_shape)):
        raise FormatError(f"{path}: payload does not match geometry {geo.sino_shape}")
    return payload.reshape(geo.sino_shape).astype(np.float64), geo, grid


def write_checkpoint(path, model, adam=None):
    header = _CKPT_HEADER.pack(b"LSCK", VERSION, model.c_in, model.c_out, model.ndim,
                               int(adam is not None))
    with open(path, "wb") as f:
        f.write(header)
        for p in model.param_list():
            f.write(_f32_le(p))
        if adam is not None:
            f.write(struct.pack("<Q", adam.step))
            for moments in (adam.m, adam.v):
                for name in Model.PARAM_NAMES:
                    f.write(_f32_le(moments[name]))


def read_checkpoint(path, dtype=np.float32):
    """Return ``(model, adam_state_or_None)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, c_in, c_out, ndim, has_adam = _CKPT_HEADER.unpack_from(raw)
    if magic != b"LSCK" or version != VERSION:
        raise FormatError(f"{path}: not a version-{VERSION} LSCK file")
    model = Model(c_in, c_out, ndim, dtype)
    offset = _CKPT_HEADER.size

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        if offset + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint payload")
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        return a

    for name in Model.PARAM_NAMES:
        model.params[name][...] = take(model.params[name].shape)
    adam = None
    if has_adam:
        (step,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        adam = AdamState(model.params)
        adam.step = step
        for moments in (adam.m, adam.v):
            for name in Model.PARAM_NAMES:
                moments[name][...] = take(model.params[name].shape)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return model, adam
