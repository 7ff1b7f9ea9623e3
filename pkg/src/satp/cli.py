"""Command-line interface.

Exit codes: 0 success, 1 usage/configuration error, 2 data or checkpoint
error, 3 training divergence.  Every artifact lands under --out with a stable
name, and a rerun with the same config and seed overwrites each file with
identical bytes.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, dump_toml, load_config
from .data import DataError, generate, save_csv
from .pipeline import (
    METHODS,
    TrainingDivergedError,
    evaluate_method,
    prepare_dataset,
    run_ablations,
    train_ae,
    train_ensemble,
    train_mc_dropout,
    train_mu,
    train_stage1,
    train_stage2,
)
from .reportio import format_float

logger = logging.getLogger("satp")

BASELINES = ("mu", "mc_dropout", "ensemble", "ae")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satp",
        description="Trajectory prediction with an online self-awareness module.")
    parser.add_argument("--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True):
        p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=Path, required=out_required, help="artifact directory")
        # accepted after the subcommand too; SUPPRESS keeps a pre-subcommand
        # --verbose from being clobbered by a subparser default
        p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS,
                       help=argparse.SUPPRESS)

    common(sub.add_parser("gen-data", help="write the synthetic corpus as CSV"))
    common(sub.add_parser("train-predictor", help="stage 1: train the trajectory predictor"))
    common(sub.add_parser("train-selfaware", help="stage 2: train the self-awareness module"))
    p = sub.add_parser("train-baseline", help="train one comparison diagnostic")
    common(p)
    p.add_argument("--method", choices=BASELINES, required=True)
    p = sub.add_parser("evaluate", help="score a method on the test split")
    common(p)
    p.add_argument("--method", choices=METHODS, default="ours")
    p.add_argument("--time", action="store_true",
                   help="measure ms/frame (timing makes reports run-dependent)")
    common(sub.add_parser("ablate", help="run the ablation matrix"))
    common(sub.add_parser("report", help="merge metrics_*.json into a comparison table"))
    common(sub.add_parser("print-config", help="print the effective configuration"),
           out_required=False)
    return parser


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _report_command(out_dir: Path) -> int:
    import json

    reports = []
    for name in sorted(os.listdir(out_dir)):
        if name.startswith("metrics_") and name.endswith(".json"):
            with open(out_dir / name, encoding="utf-8") as fh:
                reports.append(json.load(fh))
    if not reports:
        print(f"report: no metrics_*.json files under {out_dir}", file=sys.stderr)
        return 2
    columns = ["method", "aucoc_ade", "sas_ade", "aucoc_fde", "sas_fde",
               "total_parameters", "avg_ms_per_frame"]
    rows = []
    for rep in reports:
        rows.append([
            rep["method"],
            rep["aucoc"]["ade"], rep["sas"]["ade"],
            rep["aucoc"]["fde"], rep["sas"]["fde"],
            rep["total_parameters"], rep["avg_ms_per_frame"],
        ])
    widths = [max(len(col), max(len(_fmt(r[i])) for r in rows)) for i, col in enumerate(columns)]
    print("  ".join(col.ljust(w) for col, w in zip(columns, widths)))
    for row in rows:
        print("  ".join(_fmt(v).ljust(w) for v, w in zip(row, widths)))
    csv_lines = [",".join(columns)]
    for row in rows:
        cells = []
        for v in row:
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(format_float(v))
            else:
                cells.append(str(v))
        csv_lines.append(",".join(cells))
    (out_dir / "report.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return 0


def _run(args) -> int:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed

    if args.command == "print-config":
        print(dump_toml(config), end="")
        return 0

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.command == "gen-data":
        from dataclasses import replace

        from .rng import Rng

        gen_cfg = replace(config.data.synthetic, seed=Rng(config.seed).spawn(1).seed)
        records = generate(gen_cfg)
        save_csv(records, out_dir / "data.csv")
        logger.info("gen-data: wrote %d records to %s", len(records), out_dir / "data.csv")
        return 0

    dataset = prepare_dataset(config)
    if args.command == "train-predictor":
        _, result = train_stage1(config, dataset, out_dir / "predictor.ckpt")
        logger.info("train-predictor: best val %.4f at epoch %d",
                    result["best_val"], result["best_epoch"])
        return 0
    if args.command == "train-selfaware":
        _, result = train_stage2(config, dataset, out_dir / "predictor.ckpt",
                                 out_dir / "selfaware.ckpt")
        logger.info("train-selfaware: best val %.4f at epoch %d",
                    result["best_val"], result["best_epoch"])
        return 0
    if args.command == "train-baseline":
        if args.method == "mu":
            train_mu(config, dataset, out_dir / "mu.ckpt")
        elif args.method == "mc_dropout":
            train_mc_dropout(config, dataset, out_dir / "mc_dropout.ckpt")
        elif args.method == "ensemble":
            train_ensemble(config, dataset, out_dir)
        else:
            train_ae(config, dataset, out_dir / "predictor.ckpt", out_dir / "ae.ckpt")
        return 0
    if args.command == "evaluate":
        report = evaluate_method(config, dataset, args.method, out_dir, with_timing=args.time)
        sas_ade = report["sas"]["ade"]
        logger.info("evaluate %s: SAS(ADE) %s", args.method,
                    "undefined" if sas_ade is None else f"{sas_ade:.4f}")
        return 0
    if args.command == "ablate":
        run_ablations(config, dataset, out_dir / "predictor.ckpt", out_dir / "ablations.json")
        return 0
    if args.command == "report":
        return _report_command(out_dir)
    raise AssertionError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
