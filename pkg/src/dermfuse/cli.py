"""Command line interface.

Subcommands:
  run       --config <path> [--out <dir>] [--parallel-folds <n>]
  report    <results-dir>
  gradcheck
  synth     --n <int> --mode <image-only|metadata-only|both> --delta <float>
            --seed <int> --out <dir>

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics
from .data import SIGNAL_MODES, SyntheticSpec, generate_synthetic, save_dataset
from .errors import ConfigError, DataFormatError, TrainingFault
from .experiment import (
    FoldResult,
    RunResult,
    config_from_dict,
    parse_config,
    run_experiment,
    write_report,
)
from .verify import gradcheck_failures, run_gradcheck

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_FAULT = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dermfuse",
        description="multimodal image+metadata fusion experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one cross-validated experiment")
    run_p.add_argument("--config", required=True, help="JSON experiment config")
    run_p.add_argument("--out", default=None, help="output directory for results")
    run_p.add_argument("--parallel-folds", type=int, default=1,
                       help="folds trained concurrently (each owns its model)")

    report_p = sub.add_parser("report", help="aggregate result.json files into a report")
    report_p.add_argument("results_dir", help="directory containing run outputs")

    sub.add_parser("gradcheck", help="finite-difference check of every component")

    synth_p = sub.add_parser("synth", help="generate and save a synthetic dataset")
    synth_p.add_argument("--n", type=int, default=600)
    synth_p.add_argument("--classes", type=int, default=6)
    synth_p.add_argument("--image-size", type=int, default=32)
    synth_p.add_argument("--mode", choices=SIGNAL_MODES, default="both")
    synth_p.add_argument("--delta", type=float, default=3.0)
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.add_argument("--out", required=True)
    return parser


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    result = run_experiment(cfg, out_dir=args.out, parallel_folds=args.parallel_folds)
    bcc_mean, bcc_std = result.report.bcc
    auc_mean, auc_std = result.report.auc
    print(f"{cfg.backbone.kind} + {cfg.fusion.kind}: "
          f"BCC {metrics.format_mean_std(bcc_mean, bcc_std)}  "
          f"AUC {metrics.format_mean_std(auc_mean, auc_std)}  "
          f"({result.seconds:.1f}s)")
    if args.out:
        print(f"results written to {args.out}")
    return EXIT_OK


def load_result_json(path: Path) -> RunResult:
    payload = json.loads(path.read_text(encoding="utf-8"))
    cfg = config_from_dict(payload["config"])
    folds = [
        FoldResult(fold=f["fold"], bcc=f["bcc"], auc=f["auc"], history=[], seconds=0.0)
        for f in payload["folds"]
    ]
    return RunResult(config=cfg, digest=payload["digest"], folds=folds, seconds=0.0)


def cmd_report(args) -> int:
    root = Path(args.results_dir)
    paths = sorted(root.rglob("result.json"))
    if not paths:
        raise ConfigError(f"no result.json files under {root}")
    results = [load_result_json(p) for p in paths]
    write_report(results, root)
    print(f"report over {len(results)} run(s) written to {root}")
    return EXIT_OK


def cmd_gradcheck(tolerance: float = 1e-4) -> int:
    errors = run_gradcheck()
    failures = gradcheck_failures(errors, tolerance)
    for name, err in errors.items():
        status = "FAIL" if name in failures else "ok"
        print(f"{name:28s} max rel err {err:.3e}  {status}")
    if failures:
        print(f"gradcheck FAILED: {', '.join(failures)} above {tolerance:g}")
        return EXIT_VERIFICATION
    print(f"gradcheck passed: {len(errors)} components within {tolerance:g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n=args.n, num_classes=args.classes, image_size=args.image_size,
                         mode=args.mode, delta=args.delta, seed=args.seed)
    dataset = generate_synthetic(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples ({args.mode}, delta={args.delta}) to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "gradcheck":
            return cmd_gradcheck()
        if args.command == "synth":
            return cmd_synth(args)
        raise AssertionError(args.command)
    except (ConfigError, DataFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    raise SystemExit(main())
