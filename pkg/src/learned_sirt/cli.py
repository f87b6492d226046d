"""Command-line interface: ``learned-sirt <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
The default thread count comes from ``LEARNED_SIRT_THREADS`` (else all
logical cores).
"""

import argparse
import csv
import glob
import json
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import classic, formats, lsirt, metrics, phantoms
from .exceptions import ConfigError, FitError, LsirtError, NumericError
from .geometry import geometry_from_dict, geometry_to_dict, grid_to_dict
from .presets import PRESETS, preset, resolve_run_config
from .projector import forward_project
from .rng import make_rng

THREADS_ENV = "LEARNED_SIRT_THREADS"
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

PHANTOM_FAMILIES = ("triangles", "ellipsoids", "shepp2d", "shepp3d", "gauss-square")
METRICS = ("psnr", "ssim", "cnr", "fwhm", "dft-slice")


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _sidecar(path):
    return os.path.splitext(path)[0] + ".json"


def _json_number(value):
    """JSON has no infinities; write them as strings."""
    if isinstance(value, float) and not np.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def _dims(values, ndim=None):
    dims = tuple(int(v) for v in values)
    if ndim is not None and len(dims) == 1:
        dims = dims * ndim
    return dims


def _load_json(path):
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err


# phantom ------------------------------------------------------------------

def cmd_phantom(args):
    fam = args.family
    if fam == "triangles":
        vol = phantoms.gen_triangles(args.seed, _dims(args.dims, 2), args.count or 6)
    elif fam == "ellipsoids":
        vol = phantoms.gen_ellipsoids(args.seed, _dims(args.dims, 3), args.count or 20)
    elif fam == "shepp2d":
        vol = phantoms.shepp_logan(_dims(args.dims, 2))
    elif fam == "shepp3d":
        vol = phantoms.shepp_logan(_dims(args.dims, 3))
    else:
        vol = phantoms.gen_gaussian_square(args.amplitude, _dims(args.dims, 2), args.pitch)
    formats.write_volume(args.out, vol, args.pitch)
    _write_json(_sidecar(args.out), {
        "command": "phantom", "family": fam, "dims": list(vol.shape), "seed": args.seed,
        "count": args.count, "amplitude": args.amplitude, "pitch": args.pitch,
    })


# simulate -----------------------------------------------------------------

def _geometry_arg(args):
    if args.geometry in PRESETS:
        return geometry_from_dict(PRESETS[args.geometry]["geometry"])
    return geometry_from_dict(_load_json(args.geometry))


def cmd_simulate(args):
    vf = formats.read_volume(args.volume)
    geo = _geometry_arg(args)
    grid = vf.grid
    if args.noise_std is not None:
        if args.noise != "0":
            raise ConfigError("give either --noise or --noise-std, not both")
        variance = args.noise_std ** 2
    else:
        variance = phantoms.noise_variance(_noise_arg(args.noise))
    y = forward_project(vf.values, geo, grid)
    y = phantoms.add_noise(y, variance, rng=make_rng(args.seed, "noise"))
    formats.write_sinogram(args.out, y, geo, grid)
    _write_json(_sidecar(args.out), {
        "command": "simulate", "volume": args.volume, "geometry": geometry_to_dict(geo),
        "grid": grid_to_dict(grid), "noise_variance": variance, "seed": args.seed,
    })


def _noise_arg(text):
    if text in phantoms.NOISE_LEVELS:
        return text
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"noise must be a variance or one of {sorted(phantoms.NOISE_LEVELS)}") from None


# reconstruct --------------------------------------------------------------

def _int_list(text):
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def cmd_reconstruct(args):
    y, geo, grid = formats.read_sinogram(args.sinogram)
    info = {"command": "reconstruct", "sinogram": args.sinogram, "algo": args.algo}
    snaps = {}
    t0 = time.perf_counter()
    if args.algo in ("fbp", "fdk"):
        spec = classic.FilterSpec(args.filter, args.cutoff)
        fn = classic.fbp_2d if args.algo == "fbp" else classic.fdk_3d
        x = fn(y, geo, grid, spec)
        info.update(filter=args.filter, cutoff=args.cutoff)
    elif args.algo == "sirt":
        cfg = classic.SirtConfig(args.sirt_variant, args.iters or 100, args.step)
        wanted = set(_int_list(args.snapshots))

        def keep(k, xk):
            if k in wanted:
                snaps[k] = xk.copy()

        x = classic.sirt(y, geo, grid, cfg, callback=keep)
        info.update(iters=cfg.n_iter, variant=cfg.variant, step=cfg.step)
    else:
        if not args.model:
            raise ConfigError("lsirt reconstruction needs --model CHECKPOINT")
        model, _ = formats.read_checkpoint(args.model)
        variant = "lsirt" if model.c_in == 3 else "lsirt-star"
        cfg = lsirt.LsirtConfig(alpha=args.alpha, variant=variant, n_warmup=0,
                                n_total=max(args.iters or 100, 1))
        tile = _int_list(args.tile) or None
        if tile is not None and len(tile) == 1:
            tile = tile[0]
        x, snaps = lsirt.reconstruct(y, geo, grid, model, cfg, args.iters or 100,
                                     _int_list(args.snapshots), tile)
        info.update(iters=args.iters or 100, alpha=args.alpha, model=args.model,
                    variant=variant, tile=tile)
    info["seconds"] = time.perf_counter() - t0
    formats.write_volume(args.out, x, grid.pitch)
    stem, ext = os.path.splitext(args.out)
    info["snapshots"] = {}
    for k, xk in sorted(snaps.items()):
        path = f"{stem}_iter{k:04d}{ext or '.tvol'}"
        formats.write_volume(path, xk, grid.pitch)
        info["snapshots"][str(k)] = path
    info["geometry"] = geometry_to_dict(geo)
    info["grid"] = grid_to_dict(grid)
    _write_json(_sidecar(args.out), info)


# train --------------------------------------------------------------------

def _dataset(spec, grid):
    if spec.get("dir"):
        paths = sorted(glob.glob(os.path.join(spec["dir"], "*.tvol")))
        if not paths:
            raise ConfigError(f"no .tvol volumes in {spec['dir']}")
        volumes = []
        for path in paths:
            vf = formats.read_volume(path)
            # raw-HU files are scaled to internal units on import
            hu = spec.get("hu") and vf.scale == formats.SCALE_RAW
            volumes.append(vf.values * 1e-3 if hu else vf.values)
        return lsirt.ArrayDataset(volumes)
    if spec.get("family"):
        return lsirt.PhantomDataset(spec["family"], grid.dims)
    raise ConfigError("dataset needs a phantom 'family' or a volume 'dir'")


def cmd_train(args):
    base = preset(args.preset) if args.preset else {}
    doc = _load_json(args.config) if args.config else {}
    overrides = {}
    if args.variant:
        overrides["variant"] = args.variant
    if args.steps is not None:
        overrides["n_train_steps"] = args.steps
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    doc = {**doc, "lsirt": {**doc.get("lsirt", {}), **overrides}}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.dataset_dir:
        doc["dataset"] = {"dir": args.dataset_dir, "hu": args.hu}
    run = resolve_run_config(doc, base)
    dataset = _dataset(run.dataset, run.grid)
    info = {"grid": grid_to_dict(run.grid), "geometry": geometry_to_dict(run.geometry),
            "dataset": run.dataset, "seed": run.seed, "preset": args.preset}
    lsirt.train(dataset, run.geometry, run.grid, run.lsirt, seed=run.seed,
                run_dir=args.out_dir, run_info=info)


# eval ---------------------------------------------------------------------

def _rois(path):
    doc = _load_json(path)
    try:
        insert = metrics.RoiSpec(**doc["insert"])
        surround = [metrics.RoiSpec(**r) for r in doc.get("surround", [])]
    except (KeyError, TypeError) as err:
        raise ConfigError(f"{path}: bad ROI document ({err})") from err
    return insert, surround


def cmd_eval(args):
    recon = formats.read_volume(args.recon)
    truth = formats.read_volume(args.truth) if args.truth else None
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in wanted:
        if m not in METRICS:
            raise ConfigError(f"unknown metric {m!r}; choose from {METRICS}")
    report = {"recon": args.recon, "truth": args.truth}
    for m in wanted:
        if m in ("psnr", "ssim"):
            if truth is None:
                raise ConfigError(f"{m} needs a reference volume")
            if m == "psnr":
                report["psnr_data_range"] = _psnr_range(args, truth)
                report["psnr"] = metrics.psnr(recon.values, truth.values, report["psnr_data_range"])
            else:
                report["ssim_data_range"] = args.data_range or metrics.HU_DATA_RANGE
                report["ssim"] = metrics.ssim(recon.values, truth.values, report["ssim_data_range"])
        elif m in ("cnr", "fwhm"):
            if not args.rois:
                raise ConfigError(f"{m} needs --rois")
            insert, surround = _rois(args.rois)
            if m == "cnr":
                report["cnr"] = metrics.cnr(recon.values, insert, surround, recon.grid)
            else:
                fit, fwhm = metrics.edge_fwhm(recon.values, insert, pitch=recon.pitch)
                report["fwhm_mm"] = fwhm
                report["edge_fit"] = {"mu": fit.mu, "sigma": fit.sigma, "low": fit.low,
                                      "high": fit.high, "residual": fit.residual}
        else:
            vol = recon.values
            index = vol.shape[metrics.PLANES[args.plane]] // 2 if args.index is None else args.index
            image = metrics.dft_magnitude_slice(vol, args.plane, index)
            path = args.dft_out or os.path.splitext(args.out)[0] + f"_dft_{args.plane}.tvol"
            formats.write_volume(path, image)
            report["dft_slice"] = {"plane": args.plane, "index": index, "path": path}
    _write_json(args.out, {k: _json_number(v) for k, v in report.items()})
    if args.csv:
        row = {k: _json_number(report[k]) for k in ("psnr", "ssim", "cnr", "fwhm_mm") if k in report}
        new = not os.path.exists(args.csv)
        with open(args.csv, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["recon", "psnr", "ssim", "cnr", "fwhm_mm"])
            if new:
                writer.writeheader()
            writer.writerow({"recon": args.recon, **row})


def _psnr_range(args, truth):
    if args.data_range:
        return args.data_range
    if truth.scale == formats.SCALE_HU_MILLI:
        return metrics.HU_DATA_RANGE
    return float(truth.values.max() - truth.values.min())


# export -------------------------------------------------------------------

def window_to_uint8(values, lo, hi):
    """Map ``[lo, hi]`` linearly onto 0..255 with floor rounding and clamping."""
    if not hi > lo:
        raise ConfigError(f"window needs lo < hi, got [{lo}, {hi}]")
    scaled = np.floor(255.0 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo))
    return np.clip(scaled, 0, 255).astype(np.uint8)


def _display_slice(values, plane, index):
    if values.ndim == 3:
        axis = metrics.PLANES[plane]
        index = values.shape[axis] // 2 if index is None else index
        if not 0 <= index < values.shape[axis]:
            raise ConfigError(f"slice index {index} out of range")
        values = np.take(values, index, axis=axis)
    # first remaining axis runs left to right, second bottom to top
    return np.flipud(values.T)


def write_pgm(path, image):
    image = np.ascontiguousarray(image, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def cmd_export(args):
    vf = formats.read_volume(args.volume)
    values = vf.values * 1000.0 if vf.scale == formats.SCALE_HU_MILLI else vf.values
    image = window_to_uint8(_display_slice(values, args.plane, args.index), *args.window)
    if args.out.lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(image, mode="L").save(args.out)
    else:
        write_pgm(args.out, image)


# entry point --------------------------------------------------------------

def _default_threads():
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def build_parser():
    parser = argparse.ArgumentParser(prog="learned-sirt", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help=f"BLAS/worker threads (default ${THREADS_ENV} or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom volume")
    p.add_argument("family", choices=PHANTOM_FAMILIES)
    p.add_argument("dims", type=int, nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=None, help="number of triangles/ellipsoids")
    p.add_argument("--amplitude", type=float, default=1.0, help="gauss-square amplitude")
    p.add_argument("--pitch", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="forward project a volume and add noise")
    p.add_argument("volume")
    p.add_argument("--geometry", required=True, help="geometry JSON file or preset name")
    p.add_argument("--noise", default="0", help="variance or low/medium/high")
    p.add_argument("--noise-std", type=float, default=None, help="noise standard deviation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct a sinogram")
    p.add_argument("sinogram")
    p.add_argument("--algo", choices=("fbp", "fdk", "sirt", "lsirt"), required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--filter", choices=("ramp", "hann", "none"), default="ramp")
    p.add_argument("--cutoff", type=float, default=1.0)
    p.add_argument("--sirt-variant", choices=("scaled", "fixed_step"), default="scaled")
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--model")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--snapshots", default="", help="comma-separated iteration counts")
    p.add_argument("--tile", default="", help="network tile size, one or per-axis comma list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the learned update")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="run config JSON (overrides the preset)")
    p.add_argument("--variant", choices=lsirt.VARIANTS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--dataset-dir", help="directory of .tvol training volumes")
    p.add_argument("--hu", action="store_true",
                   help="dataset volumes are raw HU; scale by 1e-3 on import")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute image-quality metrics")
    p.add_argument("recon")
    p.add_argument("truth", nargs="?")
    p.add_argument("--metrics", default="psnr,ssim")
    p.add_argument("--data-range", type=float, default=None)
    p.add_argument("--rois", help="ROI JSON: {insert: {...}, surround: [{...}, ...]}")
    p.add_argument("--plane", choices=sorted(metrics.PLANES), default="coronal")
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--dft-out")
    p.add_argument("--csv", help="append a CSV row here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write a windowed 8-bit slice image (PGM or PNG)")
    p.add_argument("volume")
    p.add_argument("--window", type=float, nargs=2, required=True, metavar=("LO", "HI"))
    p.add_argument("--plane", choices=sorted(metrics.PLANES), default="axial")
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = args.threads if args.threads is not None else _default_threads()
        if threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {threads}")
        with threadpool_limits(limits=threads):
            args.func(args)
    except (NumericError, FitError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (LsirtError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
