"""Command line front end.

Subcommands:

* ``analyze``   fit one estimator to a trial CSV and write estimates
* ``simulate``  run a replication study and write metrics (plus figures)
* ``oracle``    print the true marginal effect of a synthetic family
* ``validate``  check a trial CSV against the data invariants

Exit codes: 0 success; 2 configuration or validation problems; 3 estimation
or study failures (non-convergence, singular systems, too many failed
replications); 4 I/O problems (unreadable files, missing columns).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .config import build_analysis, build_scenario, load_config
from .data import load_dataset
from .errors import (
    ConvergenceError,
    DomainError,
    EligibilityViolation,
    ExcursionError,
    FileFormatError,
    InsufficientDataError,
    NumericalError,
    PositivityError,
    PositivityViolation,
    ScenarioError,
    ShapeError,
    SingularError,
    SpecError,
    StudyError,
    ValidationReport,
)
from .estimator_gr import estimate_gr
from .estimator_sr import estimate_sr
from .figures import render_study_figures
from .results import EstimateResult
from .simulator import VARIANTS, mc_marginal_cee_s2, true_marginal_cee_s2
from .study import run_study

SCHEMA_VERSION = 1

_CONFIG_EXIT = (SpecError, DomainError, ScenarioError, ShapeError,
                EligibilityViolation, PositivityViolation)
_SOLVER_EXIT = (ConvergenceError, SingularError, NumericalError, StudyError,
                PositivityError, InsufficientDataError)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="excursion-or",
        description="Moderated excursion effects on the odds-ratio scale for "
                    "micro-randomized trials.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
        p.add_argument("--config", required=needs_config, help="JSON configuration file")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: EXCURSION_OR_THREADS or 1)")

    common(sub.add_parser("analyze", help="fit an estimator to a trial CSV"))
    sim = sub.add_parser("simulate", help="run a replication study")
    common(sim)
    sim.add_argument("--no-figures", action="store_true",
                     help="skip rendering the metric figures")
    orc = sub.add_parser("oracle", help="print a synthetic family's true effect")
    common(orc, needs_config=False)
    orc.add_argument("--variant", default=None, help="S2 variant name")
    orc.add_argument("-T", type=int, default=20, help="trial length (default 20)")
    orc.add_argument("--mc-draws", type=int, default=0,
                     help="also run a Monte Carlo cross-check with this many draws")
    common(sub.add_parser("validate", help="validate a trial CSV"))
    return parser


def _check_command(config, subcommand: str) -> None:
    if config.command is not None and config.command != subcommand:
        raise SpecError(
            f"config is for command {config.command!r} but {subcommand!r} was invoked")


def _threads(args, config) -> int:
    if args.threads is not None:
        value = args.threads
    elif config is not None and config.threads is not None:
        value = config.threads
    else:
        value = int(os.environ.get("EXCURSION_OR_THREADS", "1"))
    if value < 1:
        raise SpecError(f"threads must be >= 1, got {value}")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_estimates(result: EstimateResult, out: Path) -> None:
    rows = []
    for i, name in enumerate(result.coef_names):
        rows.append({
            "name": name,
            "estimate": float(result.beta[i]),
            "std_error": float(result.std_errors[i]),
            "ci_lower": float(result.ci_lower[i]),
            "ci_upper": float(result.ci_upper[i]),
            "z": float(result.z_values[i]),
            "p_value": float(result.p_values[i]),
        })
    payload = {
        "schema_version": SCHEMA_VERSION,
        "estimator": result.estimator,
        "coefficients": rows,
        "vcov": [[float(v) for v in row] for row in result.vcov],
        "solver": {
            "iterations": result.solver.iterations,
            "final_norm": result.solver.final_norm,
            "converged": result.solver.converged,
        },
        "n_subjects": result.n_subjects,
        "n_records_excluded": result.n_records_excluded,
    }
    with open(out / "estimates.json", "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(out / "estimates.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["name", "estimate", "se", "ci_low", "ci_high", "z", "p_value"])
        for row in rows:
            writer.writerow([row["name"], repr(row["estimate"]), repr(row["std_error"]),
                             repr(row["ci_lower"]), repr(row["ci_upper"]),
                             repr(row["z"]), repr(row["p_value"])])


def cmd_analyze(args) -> int:
    config = load_config(args.config)
    _check_command(config, "analyze")
    if config.analyze is None:
        raise SpecError("config has no 'analyze' section")
    section = config.analyze
    if "data" not in section:
        raise SpecError("analyze section needs a 'data' path")
    loaded = load_dataset(section["data"])
    if isinstance(loaded, ValidationReport):
        print(str(loaded), file=sys.stderr)
        return 2
    spec, nuisance = build_analysis(section, T=loaded.n_times)
    if spec.estimator == "SR":
        result = estimate_sr(loaded, spec, nuisance)
    else:
        result = estimate_gr(loaded, spec, nuisance)
    out = _out_dir(args)
    _write_estimates(result, out)
    for i, name in enumerate(result.coef_names):
        print(f"{name}: {result.beta[i]:.6f} (se {result.std_errors[i]:.6f}, "
              f"95% CI [{result.ci_lower[i]:.6f}, {result.ci_upper[i]:.6f}])")
    print(f"wrote {out / 'estimates.json'} and {out / 'estimates.csv'}")
    return 0


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    _check_command(config, "simulate")
    if config.simulate is None:
        raise SpecError("config has no 'simulate' section")
    section = config.simulate
    seed = args.seed if args.seed is not None else config.seed
    scenario = build_scenario(section, seed_override=seed)
    reps = int(section.get("reps", 500))
    estimators = tuple(section.get("estimators", ["SR", "GR"]))
    threads = _threads(args, config)
    metrics = run_study(scenario, estimators=estimators, reps=reps, threads=threads)
    out = _out_dir(args)
    metrics_path = out / "metrics.csv"
    metrics.write_csv(metrics_path)
    wrote = [str(metrics_path)]
    want_figures = bool(section.get("figures", True)) and not args.no_figures
    if want_figures:
        wrote += [str(p) for p in render_study_figures(metrics.rows, out)]
    for row in metrics.rows:
        print(f"{row.estimator} {row.coefficient}: bias={row.bias:+.4f} "
              f"(mc se {row.bias_mc_se:.4f}), mse={row.mse:.4f}, "
              f"coverage={row.coverage:.3f}, failures={row.failures}")
    print("wrote " + ", ".join(wrote))
    return 0


def _normalize_variant(name: str) -> str:
    key = name.replace("-", "").replace("_", "").lower()
    for variant in VARIANTS:
        if variant.lower() == key:
            return variant
    raise ScenarioError(f"unknown variant {name!r}; choose from {VARIANTS}")


def cmd_oracle(args) -> int:
    config = load_config(args.config) if args.config else None
    if config is not None:
        _check_command(config, "oracle")
    section = (config.oracle if config and config.oracle else {})
    variant_raw = args.variant or section.get("variant")
    if not variant_raw:
        raise SpecError("oracle needs a variant (--variant or config oracle.variant)")
    variant = _normalize_variant(str(variant_raw))
    T = int(section.get("T", args.T))
    value = true_marginal_cee_s2(variant, T)
    print(f"true marginal log odds-ratio ({variant}, T={T}): {value:.6f}")
    payload = {"variant": variant, "T": T, "log_odds_ratio": value}
    draws = int(section.get("mc_draws", args.mc_draws))
    if draws > 0:
        mc, mc_se = mc_marginal_cee_s2(variant, T, n_draws=draws)
        print(f"monte carlo cross-check: {mc:.6f} (se {mc_se:.2e})")
        payload.update(mc_estimate=mc, mc_se=mc_se, mc_draws=draws)
    if args.out != ".":
        out = _out_dir(args)
        with open(out / "oracle.json", "w") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
    return 0


def cmd_validate(args) -> int:
    config = load_config(args.config)
    _check_command(config, "validate")
    section = config.validate or config.analyze
    if section is None or "data" not in section:
        raise SpecError("config needs a 'validate' (or 'analyze') section with a 'data' path")
    loaded = load_dataset(section["data"])
    if isinstance(loaded, ValidationReport):
        print(str(loaded), file=sys.stderr)
        return 2
    print(f"dataset valid: {loaded.n_subjects} subjects x {loaded.n_times} decision points, "
          f"covariates: {', '.join(loaded.covariate_names) or '(none)'}")
    return 0


_COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.cmd](args)
    except FileFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except _CONFIG_EXIT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _SOLVER_EXIT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ExcursionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
