"""Named experiment configurations and run-config validation.

A run config is a JSON document::

    {
      "grid": {"dims": [...], "pitch": 1.0},
      "geometry": {"type": "parallel2d" | "cone", ...},
      "dataset": {"family": "triangles" | "ellipsoids"} or {"dir": "path", "hu": false},
      "lsirt": {... LsirtConfig fields ...},
      "seed": 0
    }

Unknown keys anywhere raise ``ConfigError``.
"""

import copy
import dataclasses

from .exceptions import ConfigError
from .geometry import geometry_from_dict, grid_from_dict
from .lsirt import LsirtConfig
from .phantoms import NOISE_LEVELS

__all__ = ["ConfigError", "PRESETS", "preset", "resolve_run_config", "RunConfig"]


def _parallel(n_angles, n_det):
    return {"type": "parallel2d", "n_angles": n_angles, "n_det": n_det, "det_pitch": 1.0}


def _cone(n_angles, n_det):
    return {"type": "cone", "n_angles": n_angles, "det_rows": n_det, "det_cols": n_det,
            "det_pitch": 1.0, "sad": 1000.0, "sdd": 1500.0}


def _entry(dims, geometry, dataset, noise, **lsirt):
    return {
        "grid": {"dims": list(dims), "pitch": 1.0},
        "geometry": geometry,
        "dataset": dataset,
        "lsirt": {"noise_variance": NOISE_LEVELS[noise], **lsirt},
        "seed": 0,
    }


PRESETS = {
    "paper-2d-triangles-low": _entry((128, 128), _parallel(30, 185), {"family": "triangles"}, "low"),
    "paper-2d-triangles-high": _entry((128, 128), _parallel(30, 185), {"family": "triangles"}, "high"),
    "paper-2d-lung-low": _entry((512, 512), _parallel(120, 742), {"dir": None}, "low"),
    "paper-2d-lung-high": _entry((512, 512), _parallel(120, 742), {"dir": None}, "high"),
    "paper-3d-ellipses-low": _entry((128,) * 3, _cone(30, 185), {"family": "ellipsoids"}, "low"),
    "paper-3d-ellipses-medium": _entry((128,) * 3, _cone(30, 185), {"family": "ellipsoids"}, "medium"),
    "paper-3d-ellipses-high": _entry((128,) * 3, _cone(30, 185), {"family": "ellipsoids"}, "high"),
    "paper-3d-256": _entry((256,) * 3, _cone(60, 371), {"dir": None}, "low",
                           n_train_steps=50_000, lr=1e-4, lr_schedule="linear",
                           patch_size=[128, 128, 128]),
    "desk-2d": _entry((64, 64), _parallel(20, 93), {"family": "triangles"}, "low",
                      n_warmup=20, n_total=40, batch_size=4, n_train_steps=2000, lr=1e-3),
}

_TOP_KEYS = {"grid", "geometry", "dataset", "lsirt", "seed"}
_DATASET_KEYS = {"family", "dir", "hu"}
_LSIRT_KEYS = {f.name for f in dataclasses.fields(LsirtConfig)}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "geometry":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclasses.dataclass(frozen=True)
class RunConfig:
    grid: object
    geometry: object
    dataset: dict
    lsirt: LsirtConfig
    seed: int
    document: dict


def resolve_run_config(document, base=None):
    """Validate ``document`` (merged over ``base``) and build the typed objects."""
    doc = _merge(base or {}, document or {})
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = {"grid", "geometry", "dataset"} - set(doc)
    if missing:
        raise ConfigError(f"config is missing {sorted(missing)}")
    dataset = doc["dataset"]
    if set(dataset) - _DATASET_KEYS:
        raise ConfigError(f"unknown dataset keys: {sorted(set(dataset) - _DATASET_KEYS)}")
    lsirt = doc.get("lsirt", {})
    if set(lsirt) - _LSIRT_KEYS:
        raise ConfigError(f"unknown lsirt keys: {sorted(set(lsirt) - _LSIRT_KEYS)}")
    try:
        grid = grid_from_dict(doc["grid"])
        geo = geometry_from_dict(doc["geometry"])
        cfg = LsirtConfig(**lsirt)
    except (TypeError, KeyError, ValueError) as err:
        raise ConfigError(str(err)) from err
    if grid.ndim != geo.ndim:
        raise ConfigError(f"{grid.ndim}D grid does not fit a {geo.ndim}D geometry")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    doc["lsirt"] = cfg.to_dict()
    return RunConfig(grid, geo, dataset, cfg, seed, doc)
