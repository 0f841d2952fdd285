"""Command line entry point: ``splatdiff <subcommand> [options]``.

Exit codes: 0 success, 2 bad input, 3 numerical failure.  Errors print one
line ``<reason>: <message>`` to stderr, where reason is ``bad-input``,
``numerical-failure`` or ``internal-error``.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .geometry import BehindCameraError, EmptyCloudError
from .io import FormatError
from .optimizer import NumericalFailure

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_INTERNAL = 1


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


GLOBAL_FLAGS = ("config", "seed", "out", "threads", "snapshot_every")


def _add_global(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=default, help="experiment seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--threads", type=int, default=default, help="worker threads")
    parser.add_argument("--snapshot-every", dest="snapshot_every", type=int, default=default,
                        help="write a PLY + PNG snapshot every N optimization steps")


def build_parser():
    parser = _Parser(prog="splatdiff", description="Differentiable surface splatting toolkit")
    _add_global(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("render", help="render a point cloud to PFM/PNG images")
    p.add_argument("--cloud", required=True)
    p.add_argument("--cameras", help="camera file or directory of .cam files "
                                     "(default: sphere views around the cloud)")
    p.add_argument("--shading", choices=["diffuse", "normal", "invdepth"])
    _add_global(p, suppress=True)

    p = sub.add_parser("optimize", help="deform or edit a cloud to match reference images")
    p.add_argument("--cloud", required=True)
    p.add_argument("--refs", help="directory of view_###.pfm|png + view_###.cam pairs")
    p.add_argument("--target", help="target cloud; references are rendered from it")
    p.add_argument("--mode", choices=["deform", "edit"], default="deform")
    p.add_argument("--debug-gradients", action="store_true",
                   help="dump the final gradient buffer as PLY (gradient in nx ny nz)")
    _add_global(p, suppress=True)

    p = sub.add_parser("noise", help="add Gaussian noise relative to the bounding-box diagonal")
    p.add_argument("--cloud", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--ascii", action="store_true", help="write ASCII instead of binary PLY")
    _add_global(p, suppress=True)

    p = sub.add_parser("metrics", help="Chamfer and Hausdorff distances between two clouds")
    p.add_argument("--cloud", required=True)
    p.add_argument("--target", required=True)
    _add_global(p, suppress=True)

    p = sub.add_parser("views", help="emit camera files")
    p.add_argument("--scheme", choices=["sphere", "error-aware"], default="sphere")
    p.add_argument("--cloud")
    p.add_argument("--refs")
    p.add_argument("--count", type=int)
    _add_global(p, suppress=True)
    return parser


def _spec(args):
    mode = getattr(args, "mode", None) if args.command == "optimize" else None
    cfg = pipeline.resolve_config(mode, args.config, args.seed)
    if getattr(args, "shading", None):
        cfg = cfg.replace(shading=args.shading)
    if not args.out:
        raise pipeline.BadInput("--out is required")
    task = f"optimize-{args.mode}" if args.command == "optimize" else args.command
    inputs = {k: getattr(args, k) for k in ("cloud", "target", "refs", "cameras")
              if getattr(args, k, None)}
    options = {}
    if args.command == "noise":
        options = dict(sigma=args.sigma, binary=not args.ascii)
    elif args.command == "views":
        options = dict(scheme=args.scheme, count=args.count or cfg.num_reference_views)
    elif args.command == "render" and args.shading:
        options = dict(shading=args.shading)
    return pipeline.ExperimentSpec(task=task, out_dir=args.out, config=cfg, seed=cfg.seed,
                                   inputs=inputs, options=options, threads=args.threads or 1,
                                   snapshot_every=args.snapshot_every or 0,
                                   debug_gradients=getattr(args, "debug_gradients", False))


def _report(reason, exc):
    text = " ".join(str(exc).split()) or type(exc).__name__
    print(f"{reason}: {text}", file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name in GLOBAL_FLAGS:
            if not hasattr(args, name):
                setattr(args, name, None)
        if args.command is None:
            raise _UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        spec = _spec(args)
        result = pipeline.run(spec)
    except (_UsageError, pipeline.BadInput, FormatError, EmptyCloudError, BehindCameraError,
            FileNotFoundError, ValueError) as exc:
        _report("bad-input", exc)
        return EXIT_BAD_INPUT
    except NumericalFailure as exc:
        _report("numerical-failure", exc)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001 - keep the one-line error contract
        _report("internal-error", exc)
        return EXIT_INTERNAL
    if args.command == "metrics":
        cd, hd = result
        print(f"chamfer {cd!r}")
        print(f"hausdorff {hd!r}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
