"""Command-line interface.

    blurmotion estimate IMAGE -o OUT      motion, segmentation and latent image
    blurmotion synth -o OUT               render one synthetic blurred scene
    blurmotion bench -o OUT               32-scene benchmark report
    blurmotion sweep -o OUT               initialization-sensitivity table
    blurmotion dump-kernels -o FILE       kernel / derivative-filter montage
    blurmotion fit-gsm IMAGE... -o FILE   fit a GSM prior to image derivatives

Every config key is also a flag of the same name (``--lam0 0.2``); flags win
over ``--config FILE``, which wins over the built-in defaults.
Exit codes: 0 ok, 2 I/O, 3 inference, 4 bad config.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .blur import as_params, build_kernel, build_kernel_grad
from .image import (downsample, ensure_dir, flow_overlay, read_png, to_gradient_domain, to_luma,
                    write_pfm, write_png)
from .pipeline import Config, ConfigError, estimate
from .priors import gsm_em
from .stage1 import DegenerateLinearization, InferenceError

log = logging.getLogger("blurmotion")

EXIT_OK, EXIT_IO, EXIT_INFERENCE, EXIT_CONFIG = 0, 2, 3, 4


class CliIOError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (flag > --config > default)")
    g.add_argument("--config", help="flat key = value config file")
    for key in Config.keys():
        if key == "seed":
            continue  # global flag
        g.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="V", default=None)
    return p


def build_config(args) -> Config:
    overrides = {}
    for key in Config.keys():
        val = getattr(args, f"cfg_{key}", None)
        if val is not None:
            overrides[key] = Config.parse_value(key, val)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = int(args.seed)
    if args.config:
        if not Path(args.config).is_file():
            raise CliIOError(f"cannot read config file {args.config}")
        return Config.from_file(args.config, **overrides)
    return Config(**overrides)


def _load_image(path) -> np.ndarray:
    try:
        return read_png(path)
    except (OSError, ValueError) as exc:
        raise CliIOError(f"cannot read image {path}: {exc}") from exc


def write_params(path, a, shape) -> None:
    a = as_params(a)
    h, w = shape
    with open(path, "w") as fh:
        fh.write(" ".join(repr(float(x)) for x in a) + "\n")
        fh.write(f"# image {w}x{h} (width x height); u_x = a1 + a2*py + a3*px, u_y = a4 + a5*py + a6*px; "
                 f"px = col - (W-1)/2, py = row - (H-1)/2; pixels; sign of a is arbitrary\n")


def read_params(path) -> np.ndarray:
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            return as_params([float(t) for t in line.split()])
    raise ValueError(f"{path}: no parameter line")


def write_trace(path, trace) -> None:
    from .stage1 import TRACE_HEADER

    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for rec in trace:
            fh.write(rec.tsv() + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> int:
    cfg = build_config(args)
    image = _load_image(args.image)
    if min(image.shape[:2]) < 32:
        raise CliIOError(f"{args.image}: image must be at least 32 x 32 pixels")
    out = ensure_dir(args.output)
    res = estimate(image, cfg)
    gray = to_luma(image) if image.ndim == 3 else image
    write_params(out / "params.txt", res.a, gray.shape)
    write_png(out / "mask.png", res.mask.astype(np.float64))
    write_png(out / "flow.png", flow_overlay(gray, res.motion_field, res.mask))
    write_pfm(out / "flow.pfm", res.motion_field)
    write_png(out / "latent.png", res.latent_mean)
    write_pfm(out / "latent.pfm", res.latent_mean)
    write_pfm(out / "r.pfm", res.r)
    write_trace(out / "trace.tsv", res.trace)
    print(f"a = {' '.join(f'{x:.4f}' for x in res.a)}  foreground {res.mask.mean():.1%}  -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import load_background, load_object, synthesize

    cfg = build_config(args)
    out = ensure_dir(args.output)
    try:
        bg = load_background(args.background)
        obj = load_object(args.object)
    except FileNotFoundError as exc:
        raise CliIOError(str(exc)) from exc
    top_left = tuple(args.top_left) if args.top_left else None
    scene = synthesize(obj, bg, args.a, top_left=top_left, frames=args.frames, seed=cfg.seed,
                       noise_std=args.noise)
    write_png(out / "blurred.png", scene.blurred)
    write_png(out / "sharp.png", scene.sharp)
    write_png(out / "gt_mask.png", scene.gt_mask.astype(np.float64))
    write_pfm(out / "gt_flow.pfm", scene.gt_motion)
    write_params(out / "gt_params.txt", scene.gt_params, scene.shape)
    print(f"{scene.frames} frames, mask {scene.gt_mask.mean():.1%} -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .synth import build_benchmark, run_benchmark, write_manifest, write_report

    cfg = build_config(args)
    out = ensure_dir(args.output)
    try:
        entries = build_benchmark(cfg.seed)
    except FileNotFoundError as exc:
        raise CliIOError(str(exc)) from exc
    if args.scenes is not None:
        # keep the uniform / affine balance for partial runs
        uni = [e for e in entries if e.kind == "uniform"]
        aff = [e for e in entries if e.kind == "affine"]
        n_aff = args.scenes // 2
        entries = uni[:args.scenes - n_aff] + aff[:n_aff]
    write_manifest(out / "manifest.tsv", entries)

    def progress(row):
        print(f"{row.scene_id} {row.kind:8s} IoU {row.iou:.3f} AEP {row.aep:.2f} ({row.seconds:.0f} s)",
              flush=True)

    rows = run_benchmark(cfg, entries, noise_std=args.noise, progress=progress)
    agg = write_report(out / "report.tsv", rows)
    print("  ".join(f"{k} {v:.3f}" for k, v in agg.items()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .synth import SWEEP_INITS, sensitivity_sweep, sweep_scene, write_sweep

    cfg = build_config(args)
    out = ensure_dir(args.output)
    inits = tuple(args.inits) if args.inits else SWEEP_INITS

    def progress(d, m, row):
        print(f"{d:10s} init {m:g}: AEP {row.aep:.2f} ({row.seconds:.0f} s)", flush=True)

    table = sensitivity_sweep(cfg, sweep_scene(noise_std=args.noise, seed=cfg.seed), inits,
                              tuple(args.directions), progress)
    write_sweep(out / "sweep.tsv", table, inits)
    return EXIT_OK


def kernel_montage(a, shape, locations, c, tile_scale=4):
    """Rows of tiles: kernel, dk/da2, dk/da5 for each location, padded to a common size.

    The kernel row uses gray levels scaled to its maximum; derivative rows use a
    signed blue-white-red map symmetric about zero.
    """
    kernels = [build_kernel(a, loc, shape, c).weights for loc in locations]
    grads = [build_kernel_grad(a, loc, shape, c) for loc in locations]
    ny = max(k.shape[0] for k in kernels)
    nx = max(k.shape[1] for k in kernels)

    def centre(t):
        out = np.zeros((ny, nx))
        oy, ox = (ny - t.shape[0]) // 2, (nx - t.shape[1]) // 2
        out[oy:oy + t.shape[0], ox:ox + t.shape[1]] = t
        return out

    def gray(t):
        m = t.max()
        v = t / m if m > 0 else t
        return np.repeat(v[..., None], 3, axis=2)

    def signed(t):
        m = np.abs(t).max()
        v = t / m if m > 0 else t
        rgb = np.ones(t.shape + (3,))
        pos, neg = np.clip(v, 0, 1), np.clip(-v, 0, 1)
        rgb[..., 1] -= pos + neg
        rgb[..., 2] -= pos
        rgb[..., 0] -= neg
        return np.clip(rgb, 0, 1)

    rows = [[gray(centre(k)) for k in kernels],
            [signed(centre(g[1])) for g in grads],
            [signed(centre(g[4])) for g in grads]]
    sep = 1
    H = 3 * ny + 4 * sep
    W = len(locations) * nx + (len(locations) + 1) * sep
    canvas = np.full((H, W, 3), 0.5)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y0 = sep + i * (ny + sep)
            x0 = sep + j * (nx + sep)
            canvas[y0:y0 + ny, x0:x0 + nx] = tile
    return np.kron(canvas, np.ones((tile_scale, tile_scale, 1)))


def default_locations(shape, n=3):
    h, w = shape
    ys = np.linspace(0.15, 0.85, n) * (h - 1)
    xs = np.linspace(0.15, 0.85, n) * (w - 1)
    return [(int(round(y)), int(round(x))) for y in ys for x in xs]


def cmd_dump_kernels(args) -> int:
    cfg = build_config(args)
    shape = tuple(args.shape)
    if args.locations:
        locs = []
        for tok in args.locations:
            try:
                r, c = (int(v) for v in tok.split(","))
            except ValueError as exc:
                raise ConfigError(f"bad location {tok!r}, expected row,col") from exc
            locs.append((r, c))
    else:
        locs = default_locations(shape)
    img = kernel_montage(args.a, shape, locs, cfg.c, args.scale)
    path = Path(args.output)
    ensure_dir(path.parent)
    write_png(path, img)
    print(f"{len(locs)} locations -> {path}")
    return EXIT_OK


def cmd_fit_gsm(args) -> int:
    cfg = build_config(args)
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for p in args.images:
        img = _load_image(p)
        img = to_luma(img) if img.ndim == 3 else img
        img = img + rng.uniform(-0.5, 0.5, img.shape) / 255.0  # undo 8-bit quantization
        for _ in range(args.scales):
            g = to_gradient_domain(img)
            samples += [g.dx[:, :-1].ravel(), g.dy[:-1, :].ravel()]
            if min(img.shape) < 8:
                break
            img = downsample(img)
    samples = np.concatenate(samples)
    if samples.size > args.samples:
        samples = rng.choice(samples, size=args.samples, replace=False)
    prior, trace = gsm_em(samples, args.J)
    path = Path(args.output)
    ensure_dir(path.parent)
    prior.save(path)
    print(f"{prior.J} components from {samples.size} responses, loglik {trace[-1]:.1f} -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="blurmotion", description=__doc__,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=None, help="single seed for all randomized behaviour")
    glob.add_argument("--threads", type=int, default=None, help="worker threads for the parallel kernels")
    glob.add_argument("-v", "--verbose", action="count", default=0)
    parents = [glob, _config_parent()]
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", parents=parents, help="estimate motion and segmentation of one image")
    p.add_argument("image")
    p.add_argument("-o", "--output", default="out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("synth", parents=parents, help="render a synthetic blurred scene")
    p.add_argument("--background", default="rocket")
    p.add_argument("--object", default="grass_disk")
    p.add_argument("--a", type=float, nargs=6, default=[15.0, 0, 0, 0, 0, 0], metavar="A")
    p.add_argument("--top-left", type=int, nargs=2, default=None, metavar=("ROW", "COL"))
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("-o", "--output", default="scene")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", parents=parents, help="run the synthetic benchmark")
    p.add_argument("--scenes", type=int, default=None, help="run only the first N scenes")
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("-o", "--output", default="bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", parents=parents, help="initialization-sensitivity sweep")
    p.add_argument("--inits", type=float, nargs="+", default=None)
    p.add_argument("--directions", nargs="+", default=["horizontal", "vertical"],
                   choices=["horizontal", "vertical"])
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("-o", "--output", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-kernels", parents=parents, help="kernel and derivative-filter montage")
    p.add_argument("--a", type=float, nargs=6, default=[0, 0.05, 0, 0, 0, 0.05], metavar="A")
    p.add_argument("--shape", type=int, nargs=2, default=[192, 256], metavar=("H", "W"))
    p.add_argument("--locations", nargs="+", default=None, metavar="ROW,COL")
    p.add_argument("--scale", type=int, default=4, help="pixel replication of the montage")
    p.add_argument("-o", "--output", default="kernels.png")
    p.set_defaults(func=cmd_dump_kernels)

    p = sub.add_parser("fit-gsm", parents=parents, help="fit a GSM prior to image derivatives")
    p.add_argument("images", nargs="+")
    p.add_argument("--J", type=int, default=4)
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("-o", "--output", default="gsm.txt")
    p.set_defaults(func=cmd_fit_gsm)
    return top


def set_threads(n) -> None:
    if n is None:
        return
    import numba

    if n < 1:
        raise ConfigError("--threads must be >= 1")
    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InferenceError, DegenerateLinearization) as exc:
        print(f"error: inference failed: {exc}", file=sys.stderr)
        return EXIT_INFERENCE


if __name__ == "__main__":
    sys.exit(main())
