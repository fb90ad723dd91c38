"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aggregator import operating_region
from .errors import CaseError, DomainError, NumericalError
from .grid import build_admittance, read_case
from .powerflow import InjectionSpec, fit_loss_model, solve_ac_newton, solve_dlpf
from .scenario import FLOAT_FMT, ScenarioConfig, TimeSeriesLog, compare_costs, run_scenario, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _fmt(v: float) -> str:
    return FLOAT_FMT.format(v)


def cmd_run(args) -> int:
    cfg = ScenarioConfig.from_file(args.scenario)
    result = run_scenario(cfg)
    write_outputs(result, args.out)
    print(json.dumps(result.costs, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare_costs(args) -> int:
    path = Path(args.dir) / "log.csv"
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseError(f"cannot read {path}: {exc}") from None
    report = compare_costs(TimeSeriesLog.from_csv(text))
    print("subnet,distributed,proportional,difference,relative")
    for name, r in report.items():
        print(",".join([name] + [_fmt(r[k]) for k in ("distributed", "proportional", "difference", "relative")]))
    return EXIT_OK


def cmd_region(args) -> int:
    case = read_case(args.case)
    if args.bus not in case.aggregators:
        raise CaseError(f"bus {args.bus} of {case.name!r} hosts no aggregator (aggregators: {sorted(case.aggregators)})")
    sys.stdout.write(operating_region(case.aggregators[args.bus]).to_csv())
    return EXIT_OK


def cmd_pf(args) -> int:
    case = read_case(args.case)
    adm = build_admittance(case)
    spec = InjectionSpec.from_case(case)
    sol = solve_dlpf(adm, spec) if args.dlpf else solve_ac_newton(case, spec, adm)
    print("bus,v,theta_deg,p,q")
    for b, v, th, p, q in zip(case.buses, sol.V, sol.theta, sol.P, sol.Q):
        print(f"{b.id},{_fmt(v)},{_fmt(float(np.rad2deg(th)))},{_fmt(p)},{_fmt(q)}")
    return EXIT_OK


def cmd_fit_loss(args) -> int:
    model = fit_loss_model(read_case(args.case))
    print(json.dumps({"d_l": model.d_l, "c": model.c, "max_residual": model.max_residual}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esgrid", description="Load-side frequency control with ES aggregators.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("scenario")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare-costs", help="integrated costs of both allocation strategies")
    c.add_argument("dir")
    c.set_defaults(func=cmd_compare_costs)

    g = sub.add_parser("region", help="operating region of one aggregator as CSV")
    g.add_argument("case")
    g.add_argument("bus", type=int)
    g.set_defaults(func=cmd_region)

    f = sub.add_parser("pf", help="power flow of a case")
    f.add_argument("case")
    mode = f.add_mutually_exclusive_group()
    mode.add_argument("--dlpf", action="store_true", help="decoupled linear power flow")
    mode.add_argument("--ac", action="store_true", help="full AC Newton (default)")
    f.set_defaults(func=cmd_pf)

    lf = sub.add_parser("fit-loss", help="fit the affine subnetwork loss model")
    lf.add_argument("case")
    lf.set_defaults(func=cmd_fit_loss)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CaseError, DomainError) as exc:
        print(f"esgrid: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"esgrid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
