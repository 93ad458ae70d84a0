"""
Main entry point for the inverse-problem flow.

    python main.py verify
    python main.py run configs/poisson_desk.yaml [--dry-run] [--output DIR]
    python main.py spectrum configs/advdiff_desk.yaml --windows 1,4 2,4 3,4
"""

import argparse
import json
import sys

from config import Config
from pipeline import EXIT_VALIDATION, InversionPipeline, run_verification
from utils import print_stage_result, validate_inputs


def parse_window(text: str):
    try:
        t0, t1 = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like 'start,end', got {text!r}")
    if not 0.0 <= t0 < t1:
        raise argparse.ArgumentTypeError(f"window needs 0 <= start < end, got {text!r}")
    return t0, t1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inverse-flow", description="Bayesian inversion experiments on PDE model problems")
    parser.add_argument("--log-level", default=None, help="Override INVERSE_FLOW_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="Run finite-difference and consistency checks")
    verify.add_argument("--inject-adjoint-bug", action="store_true", help=argparse.SUPPRESS)

    run = sub.add_parser("run", help="Run the stages of an experiment config")
    run.add_argument("config", help="YAML run config")
    run.add_argument("--dry-run", action="store_true", help="Validate the config and print the stage plan")
    run.add_argument("--output", default=None, help="Artifact directory")
    run.add_argument("--stage", default=None, help="Run a single stage")

    spectrum = sub.add_parser("spectrum", help="Misfit-Hessian spectra per observation window")
    spectrum.add_argument("config", help="YAML run config (advdiff)")
    spectrum.add_argument("--windows", nargs="*", type=parse_window, default=[], help="Windows as start,end")
    spectrum.add_argument("--output", default=None, help="Artifact directory")
    return parser


def report(result: dict, label: str) -> int:
    if result["success"]:
        print(f"{label}: {result['message']}")
    else:
        print(f"{label} failed: {result['message']}", file=sys.stderr)
        if result.get("error"):
            print(f"Error: {result['error']}", file=sys.stderr)
    return result["exit_code"]


def main(argv=None) -> int:
    """Main function: parse the command line and dispatch to the pipeline."""
    parser = build_parser()
    args = parser.parse_args(argv)
    Config.configure_logging(args.log_level)

    config_status = Config.validate_config()
    if not config_status["valid"]:
        print(f"Configuration Error: {config_status['message']}", file=sys.stderr)
        return EXIT_VALIDATION

    if args.command == "verify":
        result = run_verification(inject_adjoint_bug=args.inject_adjoint_bug)
        print(result["message"])
        return result["exit_code"]

    checks = validate_inputs(args.config, args.output)
    for warning in checks["warnings"]:
        print(f"Warning: {warning}", file=sys.stderr)
    if not checks["valid"]:
        for error in checks["errors"]:
            print(f"Error: {error}", file=sys.stderr)
        return EXIT_VALIDATION

    pipeline = InversionPipeline(args.config, args.output)

    if args.command == "spectrum":
        if not args.windows:
            parser.print_usage(sys.stderr)
            print("spectrum: at least one window is required (--windows a,b ...)", file=sys.stderr)
            return EXIT_VALIDATION
        return report(pipeline.run_spectrum(args.windows), "spectrum")

    if args.dry_run:
        result = pipeline.plan()
        if result["success"]:
            print_stage_result("PLAN", json.dumps(result["result"], indent=2))
        return report(result, "dry run")

    if args.stage:
        return report(pipeline.run_individual_stage(args.stage), f"stage {args.stage}")

    result = pipeline.run_workflow()
    if result.get("result"):
        print_stage_result("SUMMARY", json.dumps(result["result"], indent=2, default=str))
    return report(result, "run")


if __name__ == "__main__":
    sys.exit(main())
