"""Command line entry point ``msbasis``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import NumericalError, ValidationError
from .checks import run_property_suite
from .config import DESK_NF, load_config
from .sweeps import run_convergence, run_offline, run_solve


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    return [int(x) for x in text.split(",")]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--desk", action="store_true", help=f"desk preset: nf={DESK_NF}")
    p.add_argument("--nf", type=int)
    p.add_argument("--nc", type=_int_list, help="comma-separated coarse sizes")
    p.add_argument("--m", type=_int_list, help="comma-separated enrichment counts")
    p.add_argument("--output-dir")
    p.add_argument("--store")
    p.add_argument("--parallelism", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msbasis", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("offline", help="build per-edge SVD bases and write the offline store")
    _common(p)
    p = sub.add_parser("solve", help="online stage against an existing store")
    _common(p)
    p.add_argument("--variant", type=int, choices=(1, 2, 3), action="append")
    p.add_argument("--rhs", help="preset name or expression in x1, x2")
    p = sub.add_parser("convergence", help="sweep nc, m and variants; write CSV tables")
    _common(p)
    p = sub.add_parser("check", help="run the property suite")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


def _config(args):
    nf = args.nf if args.nf is not None else (DESK_NF if args.desk else None)
    return load_config(args.config, nf=nf, nc=args.nc, m=args.m, output_dir=args.output_dir,
                       store=args.store, parallelism=args.parallelism)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            report = run_property_suite()
            if args.json:
                print(json.dumps([r.as_dict() for r in report], indent=2))
            else:
                for r in report:
                    print(r.line())
            return 0 if all(r.passed for r in report) else 1
        cfg = _config(args)
        if args.command == "offline":
            for path in run_offline(cfg):
                print(path)
        elif args.command == "solve":
            for rep in run_solve(cfg, rhs=args.rhs, variants=args.variant):
                print(f"nc={rep.nc} m={rep.m} k={rep.variant} "
                      f"e_E={rep.errors['e_E']:.6e} e_L2={rep.errors['e_L2']:.6e}")
        elif args.command == "convergence":
            rows_h, rows_m = run_convergence(cfg)
            print(f"wrote {len(rows_h)} rows to sweep_H.csv and {len(rows_m)} rows to sweep_m.csv "
                  f"in {cfg.output_dir}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
