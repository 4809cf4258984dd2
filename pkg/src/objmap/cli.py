"""Command line entry point: ``objmap {run,eval,synth,export}``.

Exit codes: 0 success, 1 usage error, 2 data error. Log verbosity comes
from ``OBJMAP_LOG_LEVEL`` (default WARNING) or ``-v``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config, parse_overrides
from .dataset import DataError
from .evaluation import evaluate, format_table, ground_truth_instances, predictions_from_volume
from .export import WHAT, export
from .instances import MaskFormatError
from .pipeline import run
from .synth import GroundTruthVolume, load_scene, write_synthetic_dataset
from .volume import MapFormatError, TsdfVolume, pack_keys

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="objmap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="map a dataset directory")
    r.add_argument("dataset")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--config", help="YAML pipeline config")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    r.add_argument("--stride", type=int, help="integrate every n-th frame")
    r.add_argument("--realtime", action="store_true", help="drop frames that arrive while busy")
    r.add_argument("--threads", type=int, help="preprocess frames ahead on this many threads")
    r.add_argument("--no-masks", action="store_true", help="ignore instance masks (geometry only)")

    e = sub.add_parser("eval", help="score a map against a ground-truth volume")
    e.add_argument("map")
    e.add_argument("groundtruth", help="ground-truth .npz written by `synth`")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--csv", help="write the per-class table here")
    e.add_argument("--all-gt", action="store_true", help="do not restrict GT to observed voxels")

    s = sub.add_parser("synth", help="render a dataset from a scene file")
    s.add_argument("scene")
    s.add_argument("--out", required=True)
    s.add_argument("--voxel-size", type=float, default=0.01, help="ground-truth volume resolution")
    s.add_argument("--no-masks", action="store_true")

    x = sub.add_parser("export", help="export meshes / segments / counts from a map")
    x.add_argument("map")
    x.add_argument("--out", required=True)
    x.add_argument("--what", nargs="+", choices=WHAT, default=list(WHAT))
    return p


def _cmd_run(args):
    overrides = parse_overrides(args.set)
    if args.stride is not None:
        overrides["frame_stride"] = args.stride
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.realtime:
        overrides["realtime"] = True
    if args.no_masks:
        overrides["use_masks"] = False
    try:
        cfg = load_config(args.config, overrides)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    res = run(args.dataset, cfg, args.out)
    print(f"integrated {res.frames_integrated} frames ({len(res.skipped)} skipped) -> {res.map_path}")


def _cmd_eval(args):
    vol = TsdfVolume.load(args.map)
    gt = GroundTruthVolume.load(args.groundtruth)
    if abs(gt.voxel_size - vol.voxel_size) > 1e-9:
        raise DataError(f"GT voxel size {gt.voxel_size} differs from map voxel size {vol.voxel_size}")
    observed = None if args.all_gt else np.unique(pack_keys(vol.observed_voxels()[0]))
    per_class = evaluate(predictions_from_volume(vol), ground_truth_instances(gt, observed), args.iou)
    scene_file = Path(args.groundtruth).with_name("scene.yaml")  # written by `synth`
    names = load_scene(scene_file).class_names if scene_file.exists() else None
    table_csv, pretty = format_table(per_class, names)
    if args.csv:
        Path(args.csv).write_text(table_csv)
    print(pretty, end="")


def _cmd_synth(args):
    scene = load_scene(args.scene)
    write_synthetic_dataset(scene, args.out, masks=not args.no_masks, gt_voxel_size=args.voxel_size)
    print(f"wrote {len(scene.trajectory)} frames to {args.out}")


def _cmd_export(args):
    files = export(args.map, args.out, args.what)
    print(f"wrote {len(files)} files to {args.out}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("OBJMAP_LOG_LEVEL", "WARNING").upper()
    if args.verbose:
        level = "DEBUG" if args.verbose > 1 else "INFO"
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "eval": _cmd_eval, "synth": _cmd_synth, "export": _cmd_export}
    try:
        handlers[args.command](args)
    except UsageError as exc:
        print(f"objmap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MapFormatError, MaskFormatError, OSError, ValueError) as exc:
        print(f"objmap: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
