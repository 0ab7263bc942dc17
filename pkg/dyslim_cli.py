#!/usr/bin/env python3
"""
Operator entry point for dyslim: generate trajectory datasets, train
surrogates, evaluate checkpoints and build comparison reports.

Examples:
    dyslim_cli.py generate --config lorenz.example.yaml --split train --out runs/data/train.dysl
    dyslim_cli.py train --config lorenz.example.yaml --data runs/data/train.dysl --out runs/baseline
    dyslim_cli.py eval --checkpoint runs/baseline/checkpoint_final.dysl --data runs/data/test.dysl --out runs/baseline
    dyslim_cli.py report runs/baseline/metrics.csv runs/dyslim/metrics.csv --out runs/report

Exit codes: 0 ok, 2 configuration error, 3 diverged, 4 I/O error.
"""

import argparse
import glob
import logging
import os
import sys
from dataclasses import replace

from dyslim.config import RunConfig, load_run_config
from dyslim.data_io import fit_normalizer, read_dataset, write_dataset
from dyslim.errors import (ConfigError, ContractError, DyslimError, FormatError, GenerationError,
                           NonFiniteError, ShapeError)
from dyslim.evaluation import EvalConfig, evaluate, write_metrics_csv
from dyslim.objectives import KernelSpec
from dyslim.reporting import build_report
from dyslim.training import STATUS_DIVERGED, load_checkpoint, train
from helpers.utils import save_yaml_config, setup_run_logging

# --- Constants ---
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
RESOLVED_CONFIG_FILE = "config.resolved.yaml"
METRICS_FILE = "metrics.csv"


def latest_checkpoint(out_dir: str) -> str:
    """The periodic checkpoint with the highest step in out_dir."""
    candidates = sorted(glob.glob(os.path.join(out_dir, "checkpoint_[0-9]*.dysl")))
    if not candidates:
        raise FileNotFoundError(f"no periodic checkpoint to resume from in '{out_dir}'")
    return candidates[-1]


# --- Commands ---

def cmd_generate(args) -> int:
    run: RunConfig = load_run_config(args.config, seed=args.seed, split=args.split)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    setup_run_logging(out_dir, verbose=args.verbose)
    print(f"Generating the '{args.split}' split of '{run.system}' from {args.config} (config {run.hash})")
    dataset = run.generate(args.split)
    if args.split == "train":
        dataset.normalizer = fit_normalizer(dataset)
    write_dataset(dataset, args.out)
    print(f"Wrote '{args.out}': n={dataset.n_trajectories} T={dataset.steps} "
          f"D={dataset.state_dim} dt={dataset.dt!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config, seed=args.seed)
    setup_run_logging(args.out, append=args.resume is not None, verbose=args.verbose)
    dataset = read_dataset(args.data)
    resume_from = None
    if args.resume is not None:
        resume_from = args.resume or latest_checkpoint(args.out)
    else:
        save_yaml_config(os.path.join(args.out, RESOLVED_CONFIG_FILE), run.resolved)

    print(f"Training a {run.model.kind} surrogate on '{args.data}' "
          f"({run.training.total_steps} steps, config {run.hash})")
    result = train(run.training, dataset, run.model, args.out, config_hash=run.hash, resume_from=resume_from)
    print(f"Status: {result.status}. Ran {result.steps_run} steps, {result.skipped_steps} skipped.")
    print(f"Run log: {result.log_path}")
    print(f"Checkpoint: {result.checkpoint_path}")
    if result.status == STATUS_DIVERGED:
        for event in result.events[-3:]:
            print(f"  step {event['step']}: {event['event']}: {event['detail']}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    eval_config = EvalConfig()
    if args.config:
        eval_config = load_run_config(args.config, seed=args.seed).evaluation
    if args.label:
        eval_config = replace(eval_config, label=args.label)
    setup_run_logging(args.out, verbose=args.verbose)
    if args.seed is not None:
        logging.info(f"Seed override {args.seed} (evaluation is deterministic)")

    ckpt = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    if ckpt.normalizer is None:
        raise FormatError(f"{args.checkpoint}: checkpoint carries no normalizer")
    if ckpt.status == STATUS_DIVERGED:
        print(f"Warning: '{args.checkpoint}' comes from a diverged run.", file=sys.stderr)
    bandwidths = ckpt.config.get("training", {}).get("objective", {}).get("kernel", {}).get("bandwidths")
    kernel = KernelSpec(tuple(bandwidths)) if bandwidths else KernelSpec()

    print(f"Evaluating '{args.checkpoint}' on '{args.data}' "
          f"({eval_config.n_initial_conditions} trajectories, {eval_config.rollout_steps} steps)")
    report = evaluate(ckpt.surrogate(), dataset, ckpt.normalizer, eval_config, kernel)
    path = os.path.join(args.out, METRICS_FILE)
    write_metrics_csv(path, report, eval_config.label, ckpt.config_hash, seed=args.seed)

    print(f"Survivors: {report.survivors} (failures: {len(report.failures)})")
    for name in ("decorrelation_time", "melr", "cov_rmse", "tcm"):
        if name in report.aggregates:
            print(f"  {name}: {report.aggregates[name]:.6g}")
    for warning in report.warnings:
        print(f"Warning: {warning}", file=sys.stderr)
    print(f"Wrote '{path}'")
    return EXIT_OK


def cmd_report(args) -> int:
    setup_run_logging(args.out, verbose=args.verbose)
    if args.seed is not None:
        logging.info(f"Seed override {args.seed} (reports are deterministic)")
    written = build_report(args.metrics, args.out)
    for path in written:
        print(f"Wrote '{path}'")
    return EXIT_OK


# --- Entry point ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Train and evaluate stabilized surrogates of chaotic dynamical systems.",
        formatter_class=argparse.RawTextHelpFormatter
    )
    parser.add_argument('--verbose', action='store_true', help="Also echo log records to stderr.")
    subparsers = parser.add_subparsers(dest='command', required=True, help='Available commands')

    gen = subparsers.add_parser('generate', help="Integrate the reference solver and write a dataset.")
    gen.add_argument('--config', required=True, help="Run configuration (JSON or YAML).")
    gen.add_argument('--split', choices=('train', 'test'), default='train',
                     help="Which system.<split> section to generate.\n(default: train)")
    gen.add_argument('--seed', type=int, help="Override the split seed.")
    gen.add_argument('--out', required=True, help="Output dataset path.")
    gen.set_defaults(func=cmd_generate)

    tr = subparsers.add_parser('train', help="Train a surrogate on a dataset.")
    tr.add_argument('--config', required=True, help="Run configuration (JSON or YAML).")
    tr.add_argument('--data', required=True, help="Training dataset.")
    tr.add_argument('--out', required=True, help="Output directory for logs and checkpoints.")
    tr.add_argument('--seed', type=int, help="Override training.seed.")
    tr.add_argument('--resume', nargs='?', const='', default=None, metavar='CHECKPOINT',
                    help="Resume from CHECKPOINT, or from the latest periodic checkpoint in --out.")
    tr.set_defaults(func=cmd_train)

    ev = subparsers.add_parser('eval', help="Evaluate a checkpoint on held-out trajectories.")
    ev.add_argument('--checkpoint', required=True, help="Checkpoint written by 'train'.")
    ev.add_argument('--data', required=True, help="Test dataset.")
    ev.add_argument('--config', help="Run configuration whose evaluation section is used.")
    ev.add_argument('--label', help="Run label written to the metrics file.")
    ev.add_argument('--seed', type=int, help="Override training.seed in --config. Evaluation draws no random numbers.")
    ev.add_argument('--out', required=True, help="Output directory for metrics.csv.")
    ev.set_defaults(func=cmd_eval)

    rep = subparsers.add_parser('report', help="Merge metrics files and plot them.")
    rep.add_argument('metrics', nargs='+', help="metrics.csv files written by 'eval'.")
    rep.add_argument('--out', required=True, help="Output directory.")
    rep.add_argument('--seed', type=int, help="Accepted for symmetry with the other commands. Reports are deterministic.")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, GenerationError) as e:
        print(f"Diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except DyslimError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        logging.shutdown()


if __name__ == '__main__':
    sys.exit(main())
