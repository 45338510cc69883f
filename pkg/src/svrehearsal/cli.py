"""Command-line entry point: dataset cache, runs, ablations, reports.

Batch tool: every invocation reads a JSON config (all keys optional),
applies flag overrides, executes, and exits 0 on success or a nonzero
category code on failure (2 config, 3 data, 4 report, 1 unexpected).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .config import (ExperimentConfig, MethodSpec, load_config,
                     parse_memory_flag)
from .errors import (DataAccessError, EmptyMemory, InsufficientData,
                     InvalidConfig, InvalidInput, ReportError, ShapeError)
from .runner import report, run_ablation, run_experiment, write_dataset_cache

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_REPORT = 4


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    benchmark, method, memory = cfg.benchmark, cfg.method, cfg.memory
    if args.seed is not None:
        benchmark = dataclasses.replace(benchmark, seeds=(args.seed,))
    if getattr(args, "method", None):
        method = MethodSpec(**{**dataclasses.asdict(cfg.method), "name": args.method})
    if getattr(args, "memory", None):
        memory = parse_memory_flag(args.memory)
    out_dir = args.out if args.out else cfg.out_dir
    cfg = ExperimentConfig(benchmark, method, memory, out_dir, cfg.arms)
    cfg.validate()
    return cfg


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return _apply_overrides(cfg, args)


def cmd_gen(args) -> int:
    cfg = _load(args)
    cache_dir = os.path.join(cfg.out_dir, "cache")
    for seed in cfg.benchmark.seeds:
        path = write_dataset_cache(cfg.benchmark, seed, cache_dir)
        print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    for path in run_experiment(cfg):
        print(path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    for path in run_ablation(cfg):
        print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    for path in report(args.run_dir, args.out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svrehearsal",
        description="Continual-learning benchmark runner for gated "
                    "singular-value rehearsal and its baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_method=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="run a single seed")
        if with_method:
            p.add_argument("--method", help="override method name")
            p.add_argument("--memory", help="override memory spec: none, 20, or 1t")
        p.add_argument("--out", help="override output directory")

    p_gen = sub.add_parser("gen", help="materialize and cache the datasets")
    common(p_gen, with_method=False)
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run one method over the task sequence")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="run the ablation arms")
    common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="summarize completed runs")
    p_report.add_argument("run_dir", help="directory containing run records")
    p_report.add_argument("--out", help="directory for the summary files")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfig, InvalidInput, ShapeError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InsufficientData, EmptyMemory, DataAccessError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ReportError as exc:
        print(f"error[report]: {exc}", file=sys.stderr)
        return EXIT_REPORT
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error[unexpected]: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    raise SystemExit(main())
