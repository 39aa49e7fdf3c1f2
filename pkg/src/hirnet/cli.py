"""Command-line entry points.

``hirnet run`` executes the experiment described by a JSON config and
writes report.json, accuracy.csv, per-run trace CSVs and final-model
checkpoints. ``hirnet sweep`` repeats the run over a list of alpha values
and emits one combined accuracy CSV. ``hirnet diag`` probes a saved
checkpoint against a suite manifest and writes the diagnostics files.

Exit codes: 0 success, 2 configuration error, 3 every run failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import diagnostics as diag
from . import harness
from .data import load_manifest, stratified_batches
from .errors import ConfigError, ContractError
from .models import load_checkpoint


def _load_config(path: str) -> harness.ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return harness.ExperimentConfig.from_dict(raw)


def _write_run_outputs(report: harness.RunReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    harness.write_report_json(report, os.path.join(out_dir, "report.json"))
    harness.write_accuracy_csv([report], os.path.join(out_dir, "accuracy.csv"))
    for run in report.runs:
        if run.traces is not None:
            harness.write_trace_csv(
                run, os.path.join(out_dir, f"traces_ho{run.held_out}_seed{run.seed}.csv"))
    harness.write_checkpoints(report, out_dir)


def _cmd_run(args) -> int:
    config = _load_config(args.config)
    report = harness.run_experiment(config)
    _write_run_outputs(report, args.out)
    print(f"wrote {args.out}/report.json ({len(report.runs)} runs, "
          f"{sum(r.failed for r in report.runs)} failed)")
    return 3 if harness.all_runs_failed(report) else 0


def _cmd_sweep(args) -> int:
    config = _load_config(args.config)
    try:
        alphas = [float(tok) for tok in args.alpha.split(",") if tok]
    except ValueError as exc:
        raise ConfigError(f"bad --alpha list: {args.alpha!r}") from exc
    if not alphas:
        raise ConfigError("--alpha list is empty")
    reports = harness.sweep_alpha(config, alphas)
    os.makedirs(args.out, exist_ok=True)
    for alpha, report in reports.items():
        harness.write_report_json(report, os.path.join(args.out, f"report_alpha_{alpha:g}.json"))
    harness.write_accuracy_csv(list(reports.values()), os.path.join(args.out, "accuracy.csv"))
    print(f"wrote {args.out}/accuracy.csv ({len(alphas)} alpha values)")
    if all(harness.all_runs_failed(r) for r in reports.values()):
        return 3
    return 0


def _cmd_diag(args) -> int:
    try:
        params = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from exc
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        suite_spec = load_manifest(args.suite)
    except FileNotFoundError as exc:
        raise ConfigError(f"suite manifest not found: {args.suite}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"suite manifest is not valid JSON: {exc}") from exc
    suite = suite_spec.build()
    if suite.feature_dim != params.layer_sizes[0]:
        raise ConfigError(f"checkpoint expects {params.layer_sizes[0]}-dim inputs, "
                          f"suite provides {suite.feature_dim}")
    bundle = diag.collect_bundle(params, suite, per_class_per_domain=args.per_class_per_domain,
                                 probe_size=args.probe_size, seed=args.seed,
                                 bandwidth=args.bandwidth)
    os.makedirs(args.out, exist_ok=True)
    diag.write_domain_mmd_csv(bundle.domain_mmd, suite.domain_params,
                              os.path.join(args.out, "domain_mmd.csv"))
    for x, labels in stratified_batches(suite, args.per_class_per_domain, seed=args.seed):
        diag.write_posterior_kl_csv(params, x, labels,
                                    os.path.join(args.out, "posterior_kl.csv"))
        break
    diag.write_diag_summary(bundle, os.path.join(args.out, "diag_summary.json"),
                            extra={"probe_size": args.probe_size, "seed": args.seed})
    print(f"wrote {args.out}/domain_mmd.csv, posterior_kl.csv, diag_summary.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hirnet",
                                     description="Domain-generalization experiment engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True, help="JSON experiment config")
    p_run.add_argument("--out", default="hirnet_out", help="output directory")
    p_run.set_defaults(handler=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the config once per alpha value")
    p_sweep.add_argument("--config", required=True, help="JSON experiment config")
    p_sweep.add_argument("--alpha", required=True, help="comma-separated alpha values")
    p_sweep.add_argument("--out", default="hirnet_out", help="output directory")
    p_sweep.set_defaults(handler=_cmd_sweep)

    p_diag = sub.add_parser("diag", help="probe a checkpoint against a suite manifest")
    p_diag.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p_diag.add_argument("--suite", required=True, help="suite manifest JSON")
    p_diag.add_argument("--out", default=".", help="output directory")
    p_diag.add_argument("--bandwidth", type=float, default=None,
                        help="RBF bandwidth (default: median heuristic)")
    p_diag.add_argument("--probe-size", type=int, default=100)
    p_diag.add_argument("--per-class-per-domain", type=int, default=1)
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.set_defaults(handler=_cmd_diag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
