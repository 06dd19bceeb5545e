"""Command-line entry point: ``acs-sim {analytic,attack,game,suite}``."""
from __future__ import annotations

import argparse
import json
import sys

from . import analytics
from .experiment import ATTACKS, ExperimentConfig, run_experiment

SCHEMES = ("uninstrumented", "sp-modifier", "acs-nomask", "acs-full", "shadow-stack")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--b", type=int, default=16, help="PAC token width")
    p.add_argument("--va-size", type=int, default=39)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--q", type=int, default=None, help="query / harvest budget")
    p.add_argument("--masked", action="store_true", default=None)
    p.add_argument("--tolerance", type=float, default=None,
                   help="SEs for rates, relative error for means")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None, help="report path (stdout when omitted)")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acs-sim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    a = sub.add_parser("analytic", help="evaluate a closed-form reference")
    a.add_argument("--formula", required=True, choices=sorted(analytics.FORMULAS))
    a.add_argument("--b", type=int, required=True)
    a.add_argument("--q", type=int)
    a.add_argument("--p", type=float)

    t = sub.add_parser("attack", help="run an attack experiment")
    t.add_argument("--type", required=True, choices=ATTACKS)
    t.add_argument("--scheme", choices=SCHEMES, default="acs-full")
    t.add_argument("--process-model", choices=("strict", "lenient"), default="strict")
    t.add_argument("--reseeded", action="store_true", help="re-seed the chain on fork")
    t.add_argument("--max-guesses", type=int, default=None)
    t.add_argument("--cr-writable", action="store_true",
                   help="let the adversary overwrite the chain register")
    _common(t)

    g = sub.add_parser("game", help="run a security game")
    g.add_argument("--name", required=True, choices=("pac-collision", "acs"))
    g.add_argument("--adversary", default=None,
                   help="pac-collision: heuristic|random; acs: best|blind|offgraph")
    _common(g)

    s = sub.add_parser("suite", help="run the acceptance matrix")
    s.add_argument("--acceptance", action="store_true", required=True)
    s.add_argument("--only", type=int, nargs="*", help="criterion numbers to run")
    return ap


def _emit(cfg: ExperimentConfig, out):
    from .experiment import render
    body, code = run_experiment(cfg, out)
    if out is None:
        sys.stdout.write(render(cfg, body))
    else:
        print(f"{cfg.name}: rate={body['rate']:.6g} verdict={body['verdict']} -> {out}")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "analytic":
            v = analytics.evaluate(args.formula, args.b, q=args.q, p=args.p)
            print(json.dumps({"formula": args.formula, "b": args.b, "q": args.q,
                              "p": args.p, "value": v}))
            return 0
        if args.cmd == "suite":
            from . import acceptance
            ok = acceptance.run_all(args.only)
            return 0 if ok else 1
        common = dict(b=args.b, va_size=args.va_size, trials=args.trials, q=args.q,
                      seed=args.seed, format=args.format, tolerance=args.tolerance,
                      masked=args.masked, workers=args.workers)
        if args.cmd == "attack":
            cfg = ExperimentConfig(name=args.type, scheme=args.scheme,
                                   process_model=args.process_model, reseeded=args.reseeded,
                                   max_guesses=args.max_guesses, cr_writable=args.cr_writable,
                                   **common)
        else:
            cfg = ExperimentConfig(name=args.name, adversary=args.adversary, **common)
        return _emit(cfg, args.out)
    except (ValueError, OSError) as e:
        print(f"acs-sim: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
