"""Command line entry point: ``cageloop synthesize | gen-shape | validate``.

Exit codes: 0 on success, 2 when the run finished but produced no loop or no
interference-free pose, 1 on any error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import BadParams, CageLoopError, EmptyResult
from .pipeline import PipelineConfig, run, validate
from .shapes import SHAPE_KINDS, add_noise, generate_shape, save_points

log = logging.getLogger("cageloop")


def _parse_params(items):
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise BadParams(f"shape parameter {item!r} must look like key=value")
        try:
            out[key] = float(value)
        except ValueError:
            raise BadParams(f"shape parameter {key} needs a number, got {value!r}") from None
    return out


def _synthesize(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_json("{}")
    if args.input:
        cfg.input = args.input
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.resolution is not None:
        cfg.resolution = args.resolution
    if args.offset_radius is not None:
        cfg.offset_radius = args.offset_radius
    if args.margin is not None:
        cfg.margin = args.margin
    cfg.validate()
    try:
        report = run(cfg)
    except EmptyResult as exc:
        log.error("%s", exc)
        print(f"no loops; killed by {exc.killed_by}", file=sys.stderr)
        return 2
    print(f"{len(report.loops)} loops, {report.valid_poses} valid poses -> {cfg.out}")
    return 0 if report.valid_poses else 2


def _gen_shape(args) -> int:
    cloud = generate_shape(args.kind, _parse_params(args.params), args.n, args.seed)
    if args.noise:
        cloud = add_noise(cloud, args.noise, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_points(cloud, args.out)
    print(f"{len(cloud)} points -> {args.out}")
    return 0


def _validate(args) -> int:
    problems = validate(args.input)
    for p in problems:
        print(p)
    if not problems:
        print("ok")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cageloop", description="Caging loops and grasp poses for point clouds.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="compute ranked loops and grasp poses")
    p.add_argument("--input", help="point cloud or OBJ/OFF mesh (overrides the config)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--resolution", type=int)
    p.add_argument("--offset-radius", type=float)
    p.add_argument("--margin", type=float)
    p.set_defaults(func=_synthesize)

    p = sub.add_parser("gen-shape", help="sample a synthetic shape")
    p.add_argument("kind", choices=SHAPE_KINDS)
    p.add_argument("params", nargs="*", help="dimensions as key=value")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="noise std as a fraction of the bbox diagonal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_gen_shape)

    p = sub.add_parser("validate", help="check a result directory")
    p.add_argument("--input", required=True)
    p.set_defaults(func=_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CageLoopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
