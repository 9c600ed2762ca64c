"""segbench command line: run, sweep, gradcheck, gen, report."""
import argparse
import sys
from dataclasses import replace

from . import bench
from .errors import ConfigError, FormatError, OutputExists, SegbenchError, TrainingDiverged
from .gradsuite import run_suite

EXIT_CODES = ((ConfigError, 2), (OutputExists, 3), (FormatError, 4), (TrainingDiverged, 5), (SegbenchError, 1))


def _cmd_run(args):
    cfg = bench.parse_config(args.config)
    result = bench.run(cfg, args.out, args.force)
    if isinstance(result, list):
        for value, r in result:
            print(f"{cfg.sweep.axis}={value}: auc={_fmt(r.aggregate['auc'])} params={r.params}")
    else:
        print(f"{result.arch}: auc={_fmt(result.aggregate['auc'])} params={result.params}")
    print(f"wrote {args.out or cfg.out_dir}")
    return 0


def _cmd_sweep(args):
    cfg = bench.parse_config(args.config)
    try:
        values = [float(v) if args.axis == "snr" else int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values: cannot parse {args.values!r} for axis {args.axis}") from None
    cfg = replace(cfg, sweep=bench.parse_sweep(args.axis, values))
    for value, r in bench.run_sweep(cfg, args.out, args.force):
        print(f"{args.axis}={value}: auc={_fmt(r.aggregate['auc'])} params={r.params}")
    print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args):
    results = run_suite(instances=args.instances, seed=args.seed, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return 1 if failed else 0


def _cmd_gen(args):
    bench.generate_dataset(args.kind, args.seed, args.n, args.size, args.out, args.snr, args.force)
    print(f"wrote {args.n} {args.kind} images to {args.out}")
    return 0


def _cmd_report(args):
    bench.report(args.in_dir)
    print(f"re-rendered reports in {args.in_dir}")
    return 0


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"


def build_parser():
    parser = argparse.ArgumentParser(prog="segbench", description="Segmentation architecture benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run a config once per depth or SNR value")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=("depth", "snr"))
    p.add_argument("--values", required=True, help="comma separated, strictly ascending")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("gen", help="write a synthetic PGM dataset")
    p.add_argument("--kind", required=True, choices=("airy", "blobs", "vessels"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--snr", type=float, default=None, help="omit for clean images")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("report", help="re-render summary and plots from saved CSVs")
    p.add_argument("--in", dest="in_dir", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SegbenchError as e:
        print(f"segbench {args.command}: {e}", file=sys.stderr)
        return next(code for cls, code in EXIT_CODES if isinstance(e, cls))
    except OSError as e:
        print(f"segbench {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
