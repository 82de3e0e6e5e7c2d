"""Command-line interface.

    maslag run --config cfg.json [--h H] [--levels N] [--stage a,b,...]
               [--window-scale S] [--out DIR] [--seed N] [--strict]
    maslag compare RUN_A RUN_B [--out FILE]

MASLAG_THREADS caps the linear-algebra thread pools; it must be read before
numpy loads, so the heavy imports happen inside main().
"""

import argparse
import json
import os
import sys


def _cap_threads():
    cap = os.environ.get("MASLAG_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _build_parser():
    parser = argparse.ArgumentParser(prog="maslag",
                                     description="Monge-Ampere gradient-graph pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve a config and write artifacts")
    p_run.add_argument("--config", required=True, help="config JSON path")
    p_run.add_argument("--h", type=float, default=None,
                       help="grid spacing (default min edge / 64)")
    p_run.add_argument("--levels", type=int, default=3,
                       help="grid continuation levels")
    p_run.add_argument("--stage", default=None,
                       help="comma-separated stages (prerequisites are added)")
    p_run.add_argument("--window-scale", type=float, default=8.0,
                       help="slope-plane window half-side in polygon diameters")
    p_run.add_argument("--out", default="maslag_out", help="artifact directory")
    p_run.add_argument("--seed", type=int, default=0,
                       help="seed for randomized checks")
    p_run.add_argument("--strict", action="store_true",
                       help="abort at the first failing check")
    p_run.add_argument("--stencil-directions", type=int, default=8)
    p_run.add_argument("--resolution", type=int, default=256,
                       help="raster resolution for the slope plane")

    p_cmp = sub.add_parser("compare", help="diff two run directories")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--out", default=None, help="write the diff JSON here")
    return parser


def main(argv=None):
    _cap_threads()
    args = _build_parser().parse_args(argv)

    from . import pipeline

    if args.command == "run":
        stages = tuple(pipeline.STAGES)
        if args.stage:
            stages = tuple(s.strip() for s in args.stage.split(",") if s.strip())
        options = pipeline.RunOptions(
            h=args.h, levels=args.levels, stages=stages,
            window_scale=args.window_scale, out=args.out, seed=args.seed,
            strict=args.strict, stencil_directions=args.stencil_directions,
            resolution=args.resolution)
        try:
            result = pipeline.run(args.config, options)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if result.exit_code == pipeline.EXIT_CONFIG_INVALID:
            print(f"invalid config: {result.report.get('error')}", file=sys.stderr)
        else:
            for check in result.report.get("checks", []):
                mark = "pass" if check["passed"] else "FAIL"
                print(f"[{mark}] {check['name']}")
            print(f"artifacts in {result.outdir}")
        return result.exit_code

    if args.command == "compare":
        diff = pipeline.compare(args.dir_a, args.dir_b)
        text = json.dumps(diff, sort_keys=True, indent=2)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
        print(text)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
