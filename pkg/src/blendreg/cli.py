"""Command-line front end.

Subcommands: ``register``, ``render``, ``eval``, ``synth`` and
``gradcheck``. Exit codes: 0 success, 1 usage or input error, 2 non-finite
loss during registration, 3 failed gradient check.

Solver settings are resolved as built-in defaults, then the ``--config``
TOML file, then explicit flags. The resolved configuration is written
into the trace header. ``BLENDREG_NUM_THREADS`` caps the number of threads
used by the rasterizer kernels.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NONFINITE = 2
EXIT_CHECK_FAILED = 3
THREADS_ENV = "BLENDREG_NUM_THREADS"

log = logging.getLogger("blendreg")


class UsageError(Exception):
    """Bad flags or unreadable inputs; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _grid(text, flag):
    try:
        a, b = (int(s) for s in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"{flag} expects AxB with integers, got {text!r}") from None
    if a < 1 or b < 1:
        raise UsageError(f"{flag} counts must be positive, got {text!r}")
    return a, b


def _pair(text, flag):
    try:
        a, b = (float(s) for s in text.split(","))
    except ValueError:
        raise UsageError(f"{flag} expects two comma-separated numbers, got {text!r}") from None
    return a, b


def _load_toml(path):
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"--config: {path}: {exc}") from None


def _read(path, flag):
    from .io import CloudParseError, read_cloud

    try:
        return read_cloud(path)
    except FileNotFoundError:
        raise UsageError(f"{flag}: no such file {path}") from None
    except (CloudParseError, ValueError) as exc:
        raise UsageError(f"{flag}: {exc}") from None


def _set_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    import numba

    try:
        n = int(value)
        if n < 1:
            raise ValueError
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None


# --- register -----------------------------------------------------------------

def resolve_config(args):
    """SolverConfig from defaults, then the config file, then flags."""
    from .solver import SolverConfig, config_from_dict

    cfg = SolverConfig()
    if args.config:
        try:
            cfg = config_from_dict(_load_toml(args.config), cfg)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"--config: {args.config}: {exc}") from None
    overrides = {}
    if args.stages is not None:
        overrides["max_stages"] = args.stages
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.views is not None:
        overrides["views"] = _grid(args.views, "--views")
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations_per_stage"] = args.iterations
    if args.objective is not None:
        overrides["objective"] = args.objective
    if args.view_batch is not None:
        overrides["view_batch"] = args.view_batch
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        flag = {
            "max_stages": "--stages", "iterations_per_stage": "--iterations",
            "view_batch": "--view-batch",
        }
        names = [flag.get(k, "--" + k) for k in overrides if k in str(exc)] or ["flags"]
        raise UsageError(f"{names[0]}: {exc}") from None


def _cmd_register(args):
    from .io import transform_from_dict, write_cloud, write_json
    from .metrics import pose_error
    from .solver import RIGID, NonFiniteLossError, register, trace_csv

    if args.stages is not None and args.stages < 1:
        raise UsageError(f"--stages must be >= 1, got {args.stages}")
    cfg = resolve_config(args)
    if args.gt_pose and cfg.mode != RIGID:
        raise UsageError("--gt-pose needs --mode rigid")
    gt = None
    if args.gt_pose:
        try:
            with open(args.gt_pose) as f:
                gt = transform_from_dict(json.load(f)["pose"])
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"--gt-pose: cannot read a pose from {args.gt_pose}: {exc}") from None
    source = _read(args.source, "--source")
    target = _read(args.target, "--target")
    out = Path(args.out)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.json")
    for path in (out, trace_path, metrics_path):
        path.parent.mkdir(parents=True, exist_ok=True)

    try:
        result = register(source, target, cfg)
    except NonFiniteLossError as exc:
        print(f"register: {exc}", file=sys.stderr)
        print(json.dumps(exc.dump, indent=2), file=sys.stderr)
        return EXIT_NONFINITE

    write_cloud(result.deformed, out)
    trace_path.write_text(trace_csv(result.loss_trace, result.config))
    report = {
        "cd": result.metrics.cd,
        "emd": result.metrics.emd,
        "mse": result.metrics.mse,
        "pose_err": None,
        "initial": {"cd": result.initial_metrics.cd, "emd": result.initial_metrics.emd,
                    "mse": result.initial_metrics.mse},
        "best_loss": result.best_loss,
        "iterations": len(result.loss_trace),
        "wall_time": result.wall_time,
    }
    if result.pose is not None:
        report["pose"] = result.pose
        if gt is not None:
            report["pose_err"] = pose_error(result.pose, gt)
    write_json(report, metrics_path)
    print(f"wrote {out}, {trace_path}, {metrics_path}")
    return EXIT_OK


# --- render ---------------------------------------------------------------------

def _cmd_render(args):
    from .geometry import normalize
    from .render import (
        Raster, RasterConfig, sample_views, write_depth_png, write_mask_png, write_pfm,
    )

    n_az, n_el = _grid(args.views, "--views")
    res = _grid(args.res, "--res")
    if min(res) < 4:
        raise UsageError(f"--res must be at least 4x4, got {args.res}")
    cloud = _read(args.cloud, "--cloud")
    if not args.no_normalize:
        try:
            cloud, _, _ = normalize(cloud)
        except ValueError as exc:
            raise UsageError(f"--cloud: {exc}") from None
    views = sample_views(n_az, n_el, args.radius, res, args.extent)
    raster = Raster(cloud, views, RasterConfig())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for k, view in enumerate(views):
        j, i = divmod(k, n_az)
        stem = f"az{i}_el{j}"
        depth = raster.depth[k]
        write_pfm(out / f"{stem}_depth.pfm", depth)
        write_depth_png(out / f"{stem}_depth.png", depth, sidecar=False)
        write_mask_png(out / f"{stem}_mask.png", raster.mask[k])
        valid = raster.valid[k]
        manifest.append({
            "name": stem,
            "azimuth_deg": float(np.degrees(view.azimuth)),
            "elevation_deg": float(np.degrees(view.elevation)),
            "depth_range": [float(depth[valid].min()), float(depth[valid].max())]
            if valid.any() else None,
        })
    with open(out / "views.json", "w") as f:
        json.dump({"image_size": list(res), "ortho_extent": args.extent, "views": manifest},
                  f, indent=2)
        f.write("\n")
    print(f"wrote {len(views)} views to {out}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------------

def _cmd_eval(args):
    from .metrics import evaluate

    a = _read(args.a, "--a")
    b = _read(args.b, "--b")
    if args.same_topology and len(a) != len(b):
        raise UsageError(f"--same-topology: --a has {len(a)} points but --b has {len(b)}")
    report = evaluate(a, b, same_topology=args.same_topology, emd_limit=args.emd_limit)
    print(report.to_json(sort_keys=True))
    return EXIT_OK


# --- synth ------------------------------------------------------------------------

def _cmd_synth(args):
    from .io import (
        ARTICULATED_BAR, SyntheticPairSpec, make_pair, make_rigid_pair, write_cloud, write_json,
    )

    a, b = _pair(args.angles, "--angles")
    joints = args.segments - 1 if args.shape == ARTICULATED_BAR else 1
    try:
        spec = SyntheticPairSpec(
            shape=args.shape, segments=args.segments, source_angles=(a,) * joints,
            target_angles=(b,) * joints, num_points=args.points, noise=args.noise,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(f"synth: {exc}") from None
    source, target, gt = make_pair(spec)
    if args.rigid:
        target, pose = make_rigid_pair(source, np.random.default_rng(args.seed))
        gt = {"pose": pose}
    prefix = args.out_prefix
    ext = args.format
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_cloud(source, f"{prefix}_source.{ext}")
    write_cloud(target, f"{prefix}_target.{ext}")
    write_json(gt, f"{prefix}_gt.json")
    print(f"wrote {prefix}_source.{ext}, {prefix}_target.{ext}, {prefix}_gt.json")
    return EXIT_OK


# --- gradcheck --------------------------------------------------------------------

def _cmd_gradcheck(args):
    from . import gradcheck

    if args.step <= 0:
        raise UsageError(f"--step must be positive, got {args.step}")
    report = gradcheck.run(args.seed, args.step)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def build_parser():
    from .gradcheck import DEFAULT_STEP
    from .io import SHAPES

    p = _Parser(prog="blendreg", description="Blended-rigid point cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a source cloud onto a target cloud")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--out", required=True, help="deformed cloud (.ply, .obj or .xyz)")
    r.add_argument("--config", help="TOML file with solver settings")
    r.add_argument("--stages", type=int, help="number of blended stages K")
    r.add_argument("--mode", choices=("blended", "rigid"))
    r.add_argument("--views", help="azimuth x elevation view grid, e.g. 11x11")
    r.add_argument("--seed", type=int)
    r.add_argument("--iterations", type=int, help="iterations per stage")
    r.add_argument("--objective", choices=("multiview", "chamfer"))
    r.add_argument("--view-batch", type=int, help="views sampled per iteration")
    r.add_argument("--trace", help="trace CSV path (default: <out>.trace.csv)")
    r.add_argument("--metrics", help="metrics JSON path (default: <out>.metrics.json)")
    r.add_argument("--gt-pose", help="JSON with a ground-truth 'pose' (rigid mode)")
    r.set_defaults(func=_cmd_register)

    d = sub.add_parser("render", help="write depth and mask images of a cloud")
    d.add_argument("--cloud", required=True)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--views", default="11x11")
    d.add_argument("--res", default="64x64", help="image size HxW")
    d.add_argument("--extent", type=float, default=1.2, help="orthographic window width")
    d.add_argument("--radius", type=float, default=1.5, help="camera distance")
    d.add_argument("--no-normalize", action="store_true",
                   help="render raw coordinates instead of the centred, scaled cloud")
    d.set_defaults(func=_cmd_render)

    e = sub.add_parser("eval", help="print metrics of --a against --b as JSON")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--same-topology", action="store_true")
    e.add_argument("--emd-limit", type=int, default=4096)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic source/target pair")
    s.add_argument("--shape", choices=SHAPES, default=SHAPES[0])
    s.add_argument("--segments", type=int, default=2)
    s.add_argument("--points", type=int, default=512)
    s.add_argument("--angles", default="-30,30", help="source,target joint angle in degrees")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rigid", action="store_true",
                   help="target is a random rigid motion of the source")
    s.add_argument("--format", choices=("ply", "obj", "xyz"), default="ply")
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=_cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--step", type=float, default=DEFAULT_STEP)
    g.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _set_threads()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
