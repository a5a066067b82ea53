#!/usr/bin/env python3
"""
Command-line entry point for the IVS risk engine.

Subcommands run single stages (gen-data, compare, fit-model, fit-probit, build-dists,
simulate, figures) or the whole chain (pipeline). Exit codes: 0 success, 1 input or
configuration error, 2 numerical failure.
"""

import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.core.config import RunConfig, load_run_config, settings
from app.core.errors import InputDataError, NumericalError, RiskEngineError
from app.core.logging import logger, set_level, stage_logging
from app.models.speed_models import CRASH_TYPE_ORDER, CONDITION_ORDER
from app.services import pipeline_service
from app.services.figure_service import emit_figure_data
from app.services.risk_service import compare_to_baseline, risk_table, zone_marginal


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--trials", type=int, help="Monte-Carlo trials")
    common.add_argument("--format", choices=["json", "csv"], default="json", help="Table output format")
    common.add_argument("--workers", type=int, help="Worker processes for the risk stage")
    common.add_argument("--log-level", default=None, help="Logging level (DEBUG, INFO, ...)")
    common.add_argument("--lowfi", help="Low-fidelity CSV")
    common.add_argument("--highfi", help="High-fidelity binned counts CSV")
    common.add_argument("--fatality", help="Fatality points CSV")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="ivs-risk", description=f"{settings.PROJECT_NAME} command line")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Write a calibrated synthetic dataset")
    sub.add_parser("compare", parents=[common], help="Fidelity comparison per zone")
    sub.add_parser("fit-model", parents=[common], help="Fit the speed model with cross-validation")
    sub.add_parser("fit-probit", parents=[common], help="Fit fatality curves")
    sub.add_parser("build-dists", parents=[common], help="Build per-condition speed distributions")
    sub.add_parser("simulate", parents=[common], help="Monte-Carlo expected-value simulation")
    sub.add_parser("pipeline", parents=[common], help="Run every stage in order")
    sub.add_parser("figures", parents=[common], help="Write figure data from existing artifacts")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line flags applied on top."""
    config = load_run_config(args.config)
    return config.with_overrides(
        seed=args.seed,
        out_dir=args.out,
        n_trials=args.trials,
        workers=args.workers,
        lowfi_path=args.lowfi,
        highfi_path=args.highfi,
        fatality_path=args.fatality,
    )


def _print_fidelity(result: pipeline_service.CompareResult) -> None:
    print("zone  H(P) bits  K(P||Q) bits  E(Q) %")
    for r in result.reports:
        print(f"{r.zone_mph:>4}  {r.entropy_bits:9.3f}  {r.kl_bits:12.3f}  {r.efficiency_pct:6.1f}")
    print(f"mean E(Q): {result.mean_efficiency_pct:.1f} %")


def _print_risk(estimates, comparisons) -> None:
    table = risk_table(estimates)
    conditions = [c for c in CONDITION_ORDER if any(e.condition is c for e in estimates)]
    print("crash type     " + "".join(f"{c.value:>14}" for c in conditions))
    for crash_type in CRASH_TYPE_ORDER:
        if crash_type in table:
            row = table[crash_type]
            print(f"{crash_type.value:<15}" + "".join(f"{row[c]:14.4f}" for c in conditions))
    for c in comparisons:
        print(f"{c.crash_type.value} / {c.condition.value}: {c.verdict} "
              f"(diff {c.difference:+.4f}, se {c.combined_se:.4f})")


def _figures(config: RunConfig) -> int:
    """Rebuild figure data from whatever artifacts and inputs are available."""
    outputs = pipeline_service.PipelineOutputs()
    loaders = {
        "compare": lambda: pipeline_service.run_compare(config),
        "percent_summary": lambda: pipeline_service.load_percent_summary(config),
        "weights": lambda: pipeline_service.load_weights(config),
        "cv": lambda: pipeline_service.load_cv_result(config),
        "curves": lambda: pipeline_service.load_curves(config),
        "cond_dists": lambda: pipeline_service.load_condition_distributions(config),
        "estimates": lambda: pipeline_service.load_estimates(config),
    }
    for name, load in loaders.items():
        try:
            setattr(outputs, name, load())
        except InputDataError as e:
            logger.warning(f"Skipping {name} figure data: {e}")
    if outputs.cond_dists is not None:
        outputs.marginal = zone_marginal(config.zones, config.zone_weights)
    if outputs.estimates:
        outputs.comparisons = compare_to_baseline(outputs.estimates)
    written = emit_figure_data(outputs, config.out_dir, config)
    for path in written:
        print(path)
    return 0


def run_command(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    fmt = args.format
    command = args.command

    if command == "pipeline":
        outputs = pipeline_service.run_full_pipeline(config, fmt=fmt)
        _print_fidelity(outputs.compare)
        print(f"model CV median |error|: {outputs.weights.cv_median_abs_error_mph:.3f} mph")
        _print_risk(outputs.estimates, outputs.comparisons)
        return 0
    if command == "figures":
        return _figures(config)

    with stage_logging(command):
        if command == "gen-data":
            updated, dataset = pipeline_service.run_generate(config)
            print(f"low-fidelity records: {len(dataset.lowfi_records)} -> {updated.lowfi_path}")
            print(f"high-fidelity bins: {len(dataset.highfi_bins)} -> {updated.highfi_path}")
            print(f"fatality points -> {updated.fatality_path}")
        elif command == "compare":
            _print_fidelity(pipeline_service.run_compare(config, fmt))
        elif command == "fit-model":
            weights, _, _ = pipeline_service.run_fit_model(config)
            print("w = [" + ", ".join(f"{w:.6g}" for w in weights.pooled) + "]")
            print(f"CV median |error|: {weights.cv_median_abs_error_mph:.3f} mph ({weights.k} folds)")
        elif command == "fit-probit":
            curves, _ = pipeline_service.run_fit_probit(config)
            for c in curves:
                print(f"{c.crash_type.value}: a={c.intercept_a:.4f} b={c.slope_b:.5f}")
        elif command == "build-dists":
            dists = pipeline_service.run_build_dists(config)
            print(f"built {sum(len(z) for z in dists.values())} condition/zone distributions")
        elif command == "simulate":
            _, estimates, comparisons = pipeline_service.run_simulate(config, fmt=fmt)
            _print_risk(estimates, comparisons)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_level:
        try:
            set_level(args.log_level)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return InputDataError.exit_code
    try:
        return run_command(args)
    except RiskEngineError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return InputDataError.exit_code
    except ArithmeticError as e:
        logger.error(f"Numerical failure: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
