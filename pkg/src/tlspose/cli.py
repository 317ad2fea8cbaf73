"""Command line entry point.

Exit codes: 0 success, 2 argument or parse error, 3 numerical failure.
Outputs carry no timings or thread counts, so every subcommand is
reproducible from its flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import ScenarioFormatError, TLSPoseError
from .estimator import solve
from .generate import GenerationRecipe, gen_scenario
from .montecarlo import (compare_covariances, run_trials, sample_measurements,
                         write_comparison_csv, write_coverage_csv, write_report_json,
                         write_trials_csv)
from .sensitivity import logdet, rcond, sensitivity_report, write_sweep_csv
from .so3 import log_so3
from .uncertainty import component_names, report_at_estimate, report_at_truth

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3


class UsageError(Exception):
    pass


def _eps_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("eps list is empty")
    if any(not np.isfinite(v) or v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"eps values must be positive: {text!r}")
    return vals


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _write_json(doc: dict, path: Path) -> None:
    path.write_text(io.dumps(doc), encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_scenario(args) -> int:
    try:
        recipe = GenerationRecipe(n_features=args.n_features, direction_sigma=args.direction_sigma,
                                  angle_coeff_deg=args.angle_coeff_deg, eps_uv=args.eps_uv,
                                  depth_floor=args.depth_floor, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    scenario = gen_scenario(recipe)
    path = _out_dir(args) / "scenario.json"
    io.save_scenario(scenario, path)
    print(f"wrote {path} ({scenario.n} features)")
    return EXIT_OK


def cmd_solve(args) -> int:
    scenario = io.load_scenario(args.scenario)
    if args.measurements:
        meas = io.load_measurements(args.measurements, scenario.noise)
    elif args.zero_noise:
        meas = scenario.exact_measurements()
    else:
        meas = sample_measurements(scenario, np.random.default_rng(args.seed))
    sol = solve(meas)
    doc = io.solution_to_dict(sol, report_at_estimate(meas, sol) if sol.converged else None)
    doc["truth_error"] = {
        "dalpha": (-log_so3(sol.A_hat @ scenario.A.T)).tolist(),
        "dp": (sol.p_hat - scenario.p).tolist(),
        "du": (sol.u_hat - scenario.u).tolist(),
        "dv": (sol.v_hat - scenario.v).tolist(),
    }
    out = _out_dir(args)
    _write_json(doc, out / "solution.json")
    io.save_measurements(meas, out / "measurements.json")
    print(f"cost {sol.final_cost:.6g}, {sol.iterations} iterations, converged={sol.converged}")
    if not sol.converged:
        print("solver did not converge", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    scenario = io.load_scenario(args.scenario)
    scale = 0.0 if args.zero_noise else 1.0
    report, records = run_trials(scenario, args.trials, args.seed, threads=args.threads, scale=scale)
    analytical = report_at_truth(scenario)
    out = _out_dir(args)
    write_trials_csv(records, scenario.n, out / "trials.csv")
    write_coverage_csv(report, out / "coverage.csv")
    extra = {"inverse_check": analytical.inverse_check()}
    if report.n_used >= 2 and scale > 0:
        # below the sample threshold the table is still written, flagged low_sample
        table = compare_covariances(report, analytical, min_trials=2)
        write_comparison_csv(table, report, out / "comparison.csv")
        extra["flags"] = table.flags
        extra["trace_estimate_below_R"] = [
            bool(np.trace(analytical.cov_estimate[i]) < np.trace(scenario.noise.stacked(i)))
            for i in range(scenario.n)]
    write_report_json(report, out / "mc_report.json", extra)
    if report.low_sample:
        print(f"warning: {report.n_used} converged trials, statistics are low-sample", file=sys.stderr)
    print(f"{report.n_trials} trials, {report.failures} failures, "
          f"min pose coverage {np.min(report.coverage[:6]):.4f}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    scenario = io.load_scenario(args.scenario)
    rep = sensitivity_report(scenario, eps_values=args.eps, validate=not args.no_validate)
    out = _out_dir(args)
    write_sweep_csv(rep.sweep, out / "sweep.csv")
    features = []
    for (i, parameter), d in rep.derivatives.items():
        item = {"feature": i + 1, "parameter": parameter}
        item.update({k: np.asarray(v).tolist() for k, v in d.items()})
        if (i, parameter) in rep.fd_errors:
            item["fd_relative_error"] = rep.fd_errors[(i, parameter)]
        features.append(item)
    doc = {
        "fd_validated": bool(rep.fd_errors),
        "fd_passed": rep.fd_passed if rep.fd_errors else None,
        "fd_tolerance": rep.tolerance,
        "logdet_negative": rep.logdet_negative,
        "derivatives": features,
    }
    _write_json(doc, out / "derivatives.json")
    for row in rep.sweep:
        print(f"eps {row.eps_uv:g}: rcond {row.rcond_F:.4e}, logdet {row.logdet_F:.6f}")
    if rep.fd_errors and not rep.fd_passed:
        print("finite-difference validation failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_fim(args) -> int:
    scenario = io.load_scenario(args.scenario)
    rep = report_at_truth(scenario)
    doc = io.uncertainty_to_dict(rep)
    doc.update({
        "components": component_names(scenario.n),
        "rcond": rcond(rep.F),
        "logdet": logdet(rep.F),
        "inverse_check": rep.inverse_check(),
    })
    _write_json(doc, _out_dir(args) / "fim.json")
    print(f"rcond {doc['rcond']:.4e}, logdet {doc['logdet']:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON (default: bundled reference scenario)")
    common.add_argument("--seed", type=_non_negative, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=_non_negative, default=1, help="worker processes, 0 = all CPUs")
    common.add_argument("--zero-noise", action="store_true", help="use exact measurements")

    parser = argparse.ArgumentParser(prog="tlspose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenario", parents=[common], help="draw a random scenario")
    p.add_argument("--n-features", type=int, default=6)
    p.add_argument("--direction-sigma", type=float, default=100.0)
    p.add_argument("--angle-coeff-deg", type=float, default=0.006)
    p.add_argument("--eps-uv", type=float, default=190.0)
    p.add_argument("--depth-floor", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_scenario)

    p = sub.add_parser("solve", parents=[common], help="solve one measurement set")
    p.add_argument("--measurements", help="measurement JSON; default draws one set with --seed")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("montecarlo", parents=[common], help="run Monte Carlo trials")
    p.add_argument("--trials", type=_positive, default=10000)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("sensitivity", parents=[common], help="derivatives and conditioning sweep")
    p.add_argument("--eps", type=_eps_list, default=[1.0, 10.0, 100.0, 1000.0],
                   help="comma-separated depth sigma scales in meters")
    p.add_argument("--no-validate", action="store_true", help="skip the finite-difference check")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("fim", parents=[common], help="information matrix and covariances at truth")
    p.set_defaults(func=cmd_fim)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioFormatError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TLSPoseError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
