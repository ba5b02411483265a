"""Command-line entry point.

Single-analysis subcommands synthesize a one-analysis plan and run it through
the same orchestration as plan mode, so a command line and the equivalent
plan file produce the same report. Exit codes: 0 success, 1 plan or data
validation failure, 2 when the report contains a failed analysis.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Any, Sequence

from .dataset import DeviceOutput, Label, ValidationRecord, serialize_records
from .report import (
    IngestError,
    PlanError,
    emit_report,
    load_plan,
    plan_from_dict,
    render_markdown,
    report_to_dict,
    run_plan,
)
from .resample import (
    SeededGenerator,
    simulate_binary_study,
    simulate_risk_scores,
    simulate_survival,
)

__all__ = ["main"]


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; 2 is reserved for analysis
    # failures here, so argument problems are rerouted to exit code 1.
    def error(self, message: str):
        raise CliError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("dataset", help="CSV dataset in the canonical schema")
    p.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p.add_argument(
        "--ci-method",
        choices=("cp", "wilson"),
        default="cp",
        help="interval method for proportions (default cp)",
    )
    _add_output(p)


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="directory for report and plot files (default: print to stdout)")
    p.add_argument("--format", choices=("json", "md"), default="json", help="report format")
    p.add_argument("--seed", type=int, default=None, help="seed recorded in the report (or DAVAL_SEED)")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CliError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_names(text: str) -> list[str]:
    return [tok.strip() for tok in text.split(",") if tok.strip()]


def build_parser() -> _Parser:
    parser = _Parser(prog="daval", description="Diagnostic device validation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("accuracy", parents=[], help="2x2 accuracy metrics and goal test")
    _add_common(p)
    p.add_argument("--goal", type=float, help="performance goal tested one-sided for sensitivity and specificity")
    p.add_argument("--alpha", type=float, default=0.05, help="goal-test significance level")
    p.add_argument("--pretest", type=float, help="pre-test risk for post-test risk read-off")
    p.set_defaults(func=_cmd_accuracy)

    p = sub.add_parser("qc", help="triage table with ungradable outputs as a third row")
    _add_common(p)
    p.set_defaults(func=_cmd_qc)

    p = sub.add_parser("riskscore", help="calibration, discrimination and utility of score outputs")
    _add_common(p)
    p.add_argument("--calibration", choices=("large", "slope"), default="slope")
    p.add_argument("--bins", type=int, default=10, help="calibration bins (default 10)")
    p.add_argument("--train-prev", type=float, help="development prevalence for scaling")
    p.add_argument("--target-prev", type=float, help="deployment prevalence for scaling")
    p.add_argument("--cutoffs", type=_csv_floats, help="risk-strata cutoffs, e.g. 0.2,0.5")
    p.add_argument("--dca-grid", type=_csv_floats, help="decision-curve thresholds")
    p.set_defaults(func=_cmd_riskscore)

    p = sub.add_parser("agreement", help="Bland-Altman and Deming comparison of two columns")
    _add_common(p)
    p.add_argument("--x-col", required=True, help="column with the first method's values")
    p.add_argument("--y-col", required=True, help="column with the second method's values")
    p.add_argument("--lambda", dest="lam", type=float, help="error-variance ratio (default 1)")
    p.set_defaults(func=_cmd_agreement)

    p = sub.add_parser("precision", help="repeatability/reproducibility variance components")
    _add_common(p)
    p.add_argument(
        "--condition-fields",
        type=_csv_names,
        default=["operator_id", "device_unit_id"],
        help="record fields whose combinations define a condition",
    )
    p.set_defaults(func=_cmd_precision)

    p = sub.add_parser("survival", help="Kaplan-Meier, log-rank, Cox and added-value LRT")
    _add_common(p)
    p.add_argument("--groups-by", help="record field or covariate defining risk groups")
    p.add_argument("--horizon", type=float, help="time for risk read-off")
    p.add_argument("--baseline-covariates", type=_csv_names, help="baseline model columns")
    p.add_argument("--added-covariates", type=_csv_names, help="columns added on top of baseline")
    p.set_defaults(func=_cmd_survival)

    p = sub.add_parser("simulate", help="write a seeded synthetic dataset in the canonical schema")
    p.add_argument("--kind", choices=("binary", "scores", "survival"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--prevalence", type=float)
    p.add_argument("--sensitivity", type=float)
    p.add_argument("--specificity", type=float)
    p.add_argument("--auc", type=float)
    p.add_argument("--baseline-hazard", type=float)
    p.add_argument("--log-hazard-ratio", type=float, default=0.0)
    p.add_argument("--censor-rate", type=float)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=None, help="generator seed (or DAVAL_SEED; default 0)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="execute an analysis plan")
    p.add_argument("--plan", required=True, help="plan JSON file")
    p.add_argument("--out", help="directory for report and plot files")
    p.add_argument("--format", choices=("json", "md"), default="json")
    p.add_argument("--seed", type=int, default=None, help="overrides the plan's seed")
    p.set_defaults(func=_cmd_run)

    return parser


def _resolve_seed(explicit: int | None) -> int | None:
    if explicit is not None:
        return explicit
    env = os.environ.get("DAVAL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"DAVAL_SEED must be an integer, got {env!r}") from None
    return None


def _finish(report, args) -> int:
    if args.out:
        for path in emit_report(report, args.out, args.format):
            print(path)
    elif args.format == "md":
        print(render_markdown(report))
    else:
        print(json.dumps(report_to_dict(report), indent=2, sort_keys=True))
    if report.has_failures:
        for name, block in report.results.items():
            if "error" in block:
                print(f"analysis {name} failed: {block['error']}", file=sys.stderr)
        return 2
    return 0


def _run_single(analysis: str, args, params: dict[str, Any]) -> int:
    params = {k: v for k, v in params.items() if v is not None}
    raw: dict[str, Any] = {
        "dataset": args.dataset,
        "analyses": [analysis],
        "level": args.level,
        "ci_method": args.ci_method,
    }
    if params:
        raw["params"] = {analysis: params}
    seed = _resolve_seed(args.seed)
    if seed is not None:
        raw["seed"] = seed
    report = run_plan(plan_from_dict(raw))
    return _finish(report, args)


def _cmd_accuracy(args) -> int:
    return _run_single(
        "accuracy", args, {"goal": args.goal, "alpha": args.alpha, "pretest": args.pretest}
    )


def _cmd_qc(args) -> int:
    return _run_single("qc", args, {})


def _cmd_riskscore(args) -> int:
    if (args.train_prev is None) != (args.target_prev is None):
        raise CliError("--train-prev and --target-prev must be given together")
    return _run_single(
        "riskscore",
        args,
        {
            "calibration": args.calibration,
            "bins": args.bins,
            "train_prev": args.train_prev,
            "target_prev": args.target_prev,
            "cutoffs": args.cutoffs,
            "dca_grid": args.dca_grid,
        },
    )


def _cmd_agreement(args) -> int:
    return _run_single(
        "agreement", args, {"x_col": args.x_col, "y_col": args.y_col, "lambda": args.lam}
    )


def _cmd_precision(args) -> int:
    return _run_single("precision", args, {"condition_fields": args.condition_fields})


def _cmd_survival(args) -> int:
    return _run_single(
        "survival",
        args,
        {
            "groups_by": args.groups_by,
            "horizon": args.horizon,
            "baseline_covariates": args.baseline_covariates,
            "added_covariates": args.added_covariates,
        },
    )


def _cmd_simulate(args) -> int:
    seed = _resolve_seed(args.seed)
    gen = SeededGenerator(seed=0 if seed is None else seed)

    def need(value, flag):
        if value is None:
            raise CliError(f"simulate --kind {args.kind} needs {flag}")
        return value

    if args.kind == "binary":
        records = simulate_binary_study(
            args.n,
            need(args.prevalence, "--prevalence"),
            need(args.sensitivity, "--sensitivity"),
            need(args.specificity, "--specificity"),
            gen,
        )
    elif args.kind == "scores":
        scores, outcomes = simulate_risk_scores(
            args.n, need(args.prevalence, "--prevalence"), need(args.auc, "--auc"), gen
        )
        records = [
            ValidationRecord(
                subject_id=f"s{i:06d}",
                site_id="sim",
                output=DeviceOutput.score(float(scores[i])),
                truth=Label.POSITIVE if outcomes[i] else Label.NEGATIVE,
            )
            for i in range(args.n)
        ]
    else:
        records = simulate_survival(
            args.n,
            need(args.baseline_hazard, "--baseline-hazard"),
            args.log_hazard_ratio,
            need(args.censor_rate, "--censor-rate"),
            gen,
        )
    serialize_records(records, args.out)
    print(args.out)
    return 0


def _cmd_run(args) -> int:
    plan = load_plan(args.plan)
    seed = _resolve_seed(args.seed)
    if seed is not None:
        plan = dataclasses.replace(plan, seed=seed)
    report = run_plan(plan)
    return _finish(report, args)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PlanError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
