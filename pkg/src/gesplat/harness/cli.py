"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gesplat", description="Pose-free sparse-view Gaussian splatting harness.")
    p.add_argument("--json", action="store_true", help="print a machine-readable JSON result")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic scene bundle")
    s.add_argument("--spec", help="scene spec JSON (default: reference scene)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train on a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--config", help="TrainConfig JSON (default: the bundle's config.json)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss CSV path (default: next to the checkpoint)")

    s = sub.add_parser("render", help="render a checkpoint camera")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--camera", type=int, required=True)
    s.add_argument("--out", required=True, help=".ppm or .gimg")

    s = sub.add_parser("eval", help="score a checkpoint on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--config")
    s.add_argument("--no-refine", action="store_true", help="skip test-time pose refinement")

    s = sub.add_parser("flow-depth", help="blended flow depth of one view")
    s.add_argument("--bundle", required=True)
    s.add_argument("--view", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gt-cameras", action="store_true", help="use ground-truth instead of imported cameras")

    s = sub.add_parser("refine-pose", help="test-time pose refinement against a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--init-camera", required=True, help="camera id stored in the checkpoint or a camera JSON file")
    s.add_argument("--out", help="write the refined camera JSON here")
    s.add_argument("--config")

    s = sub.add_parser("ablate", help="train and evaluate with one component disabled")
    s.add_argument("--bundle", required=True)
    s.add_argument("--disable", required=True, choices=("hybrid", "graph", "depth"))
    s.add_argument("--config")
    s.add_argument("--out", help="checkpoint path")
    return p


def _config(args, bundle=None):
    from ..optimize import TrainConfig

    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except OSError as exc:
            from ..errors import DataError

            raise DataError(f"cannot read config {args.config}: {exc}") from exc
    else:
        d = dict(bundle.config) if bundle is not None else {}
    d = {k: v for k, v in d.items() if k not in ("train_views", "test_views")}
    if "GESPLAT_SEED" in os.environ:
        try:
            d["seed"] = int(os.environ["GESPLAT_SEED"])
        except ValueError as exc:
            raise UsageError("GESPLAT_SEED must be an integer") from exc
    return TrainConfig.from_dict(d)


def _load(path):
    from .bundle import import_init, load_bundle

    return import_init(load_bundle(path))


def _cmd_synth(args):
    from .bundle import save_bundle
    from .synth import SyntheticSceneSpec, reference_spec, synth_scene

    spec = SyntheticSceneSpec.from_json(args.spec) if args.spec else reference_spec()
    if "GESPLAT_SEED" in os.environ:
        spec.seed = int(os.environ["GESPLAT_SEED"])
    scene = synth_scene(spec)
    save_bundle(scene.bundle, args.out)
    return {"out": str(args.out), "views": len(scene.bundle.cameras), "gaussians": scene.gt_set.n_total, "matches": len(scene.bundle.matches)}


def _cmd_train(args):
    from ..optimize import train

    bundle = _load(args.bundle)
    cfg = _config(args, bundle)
    log = args.log or str(Path(args.out).with_suffix(".csv"))
    res = train(bundle, cfg, checkpoint_path=args.out, log_path=log)
    last = res.log[-1] if res.log else {}
    return {"checkpoint": str(args.out), "log": log, "iterations": len(res.log), "final_total": last.get("total"), "final_psnr_train": last.get("psnr_train")}


def _cmd_render(args):
    from .. import renderer
    from . import io

    gset, _, cams, _ = io.read_checkpoint(args.ckpt)
    if args.camera not in cams:
        from ..errors import DataError

        raise DataError(f"checkpoint has no camera {args.camera}")
    img = renderer.rasterize(gset, cams[args.camera]).color
    if str(args.out).lower().endswith(".ppm"):
        io.write_ppm(args.out, img)
    else:
        io.write_gimg(args.out, img)
    return {"out": str(args.out), "camera": args.camera}


def _cmd_eval(args):
    from . import io
    from .evaluate import evaluate

    gset, _, cams, _ = io.read_checkpoint(args.ckpt)
    bundle = _load(args.bundle)
    cfg = _config(args, bundle)
    model_cams = {v: c for v, c in cams.items() if v in bundle.train_views}
    ev = evaluate(gset, model_cams, bundle, args.split, cfg, refine=not args.no_refine)
    return ev.to_dict()


def _cmd_flow_depth(args):
    from ..errors import DataError
    from ..flow_depth import FlowField, estimate_depth
    from . import io

    bundle = _load(args.bundle)
    cams = bundle.gt_cameras if args.gt_cameras else bundle.cameras
    if args.gt_cameras and not cams:
        raise DataError("bundle has no ground-truth cameras")
    flows = {j: FlowField(i, j, f) for (i, j), f in bundle.flows.items() if i == args.view}
    if not flows:
        raise DataError(f"no flow rasters start at view {args.view}")
    est = estimate_depth(args.view, cams, flows)
    # back to the bundle's original units
    depth = np.where(est.valid, est.depth / bundle.scale, est.depth)
    io.write_depth(args.out, depth)
    return {"out": str(args.out), "valid_pixels": int(est.valid.sum()), "partners": sorted(flows)}


def _cmd_refine_pose(args):
    from ..errors import DataError
    from ..optimize import TrainConfig, refine_test_pose
    from . import io

    gset, _, cams, _ = io.read_checkpoint(args.ckpt)
    if args.init_camera.lstrip("-").isdigit():
        cid = int(args.init_camera)
        if cid not in cams:
            raise DataError(f"checkpoint has no camera {cid}")
        init = cams[cid]
    else:
        try:
            rec = json.loads(Path(args.init_camera).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read camera {args.init_camera}: {exc}") from exc
        init = io.camera_from_dict(rec[0] if isinstance(rec, list) else rec)
    image = io.read_image(args.image)
    cfg = _config(args) if args.config else TrainConfig()
    cam = refine_test_pose(gset, image, init, cfg)
    if args.out:
        io.atomic_write_text(args.out, json.dumps(io.camera_to_dict(cam), indent=1))
    return {"camera": io.camera_to_dict(cam)}


def _cmd_ablate(args):
    from ..optimize import ablated, train
    from .evaluate import evaluate

    bundle = _load(args.bundle)
    cfg = ablated(_config(args, bundle), args.disable)
    res = train(bundle, cfg, checkpoint_path=args.out)
    ev = evaluate(res.gset, res.cameras, bundle, "test", cfg)
    return {"disabled": args.disable, **ev.to_dict()}


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "flow-depth": _cmd_flow_depth,
    "refine-pose": _cmd_refine_pose,
    "ablate": _cmd_ablate,
}


def _emit(result, as_json: bool):
    if as_json:
        print(json.dumps(result, sort_keys=True, default=_jsonable))
    else:
        for k, v in result.items():
            print(f"{k}: {v}")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x) if math.isfinite(x) else str(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def main(argv=None) -> int:
    from ..errors import ConfigError, DataError, DivergenceError, GeometryError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gesplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.threads < 1:
        print("gesplat: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    import torch

    torch.set_num_threads(args.threads)
    try:
        result = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"gesplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"gesplat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, GeometryError, FloatingPointError) as exc:
        print(f"gesplat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit(result, args.json)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
