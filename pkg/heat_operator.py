#!/usr/bin/env python3
"""
Command-line entry point for the heat-conduction operator pipeline:
generate GPR/finite-difference training pairs, train the DeepONet, and
check datasets and models against the finite-difference oracle.

    python heat_operator.py --preset square-homogeneous generate
    python heat_operator.py --preset square-homogeneous train
    python heat_operator.py --preset square-homogeneous testfn --which all
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from pipeline.commands import (cmd_eval, cmd_generate, cmd_plot, cmd_solve, cmd_testfn, cmd_train, cmd_verify,
                               VERIFY_THRESHOLD)
from pipeline.config import PRESETS, load_config
from pipeline.errors import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_UNEXPECTED, HeatOpError
from pipeline.manufactured import BENCHMARKS, PAIR_NAMES
from pipeline.progress import create_progress_callback

logger = logging.getLogger("heat_operator")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="GPR-generated training data and DeepONet surrogates for steady heat conduction")
    parser.add_argument("--config", help="JSON run config (overlays the preset)")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="Named run preset")
    parser.add_argument("--seed", type=int, help="Override every seed in the config")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen = subparsers.add_parser("generate", help="Generate a dataset without any PDE solve")
    gen.add_argument("--out", help="Dataset directory")

    tr = subparsers.add_parser("train", help="Train a DeepONet on a dataset")
    tr.add_argument("--dataset", help="Dataset directory")
    tr.add_argument("--out", help="Model directory")
    tr.add_argument("--warm-start", help="Model directory to resume from")
    tr.add_argument("--group", type=int, help="Train only on functions of this GPR group")

    tf = subparsers.add_parser("testfn", help="Score a model on the benchmark heat sources")
    tf.add_argument("--model", help="Model directory")
    tf.add_argument("--which", choices=[*BENCHMARKS, "all"], default="all")
    tf.add_argument("--a", type=float)
    tf.add_argument("--b", type=float)
    tf.add_argument("--c-test", type=float)
    tf.add_argument("--out", help="Output directory for fields and metrics")
    tf.add_argument("--no-plot", action="store_true", help="Skip heatmap export")

    ver = subparsers.add_parser("verify", help="Oracle-check every pair of a dataset")
    ver.add_argument("--dataset", help="Dataset directory")
    ver.add_argument("--threshold", type=float, default=VERIFY_THRESHOLD, help="Relative L2 flag threshold")
    ver.add_argument("--out", help="Report directory")

    sol = subparsers.add_parser("solve", help="Oracle solve of a manufactured or benchmark source")
    sol.add_argument("--source", choices=PAIR_NAMES, default="benchmark")
    sol.add_argument("--which", choices=BENCHMARKS, default="q1")
    sol.add_argument("--out", help="CSV path")

    ev = subparsers.add_parser("eval", help="Train/test metrics of a model")
    ev.add_argument("--model", help="Model directory")
    ev.add_argument("--dataset", help="Dataset directory")
    ev.add_argument("--per-field", action="store_true", help="Average metrics per field instead of pooling")
    ev.add_argument("--group", type=int, help="Score on the split taken within this GPR group (as train --group)")

    pl = subparsers.add_parser("plot", help="Heatmaps from (x, y, value) CSV fields")
    pl.add_argument("files", nargs="+")
    pl.add_argument("--out", default=".", help="Output directory")
    pl.add_argument("--triptych", action="store_true", help="Prediction / reference / difference panels")
    return parser


def main(argv=None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv("HEATOP_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    try:
        if args.command == "plot":
            return handle_plot(args)
        if args.command == "verify" and args.dataset and not (args.config or args.preset):
            return handle_verify(None, args)
        cfg = load_config(args.config, args.preset, args.seed)
        handlers = {
            "generate": handle_generate,
            "train": handle_train,
            "testfn": handle_testfn,
            "verify": handle_verify,
            "solve": handle_solve,
            "eval": handle_eval,
        }
        return handlers[args.command](cfg, args)
    except HeatOpError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except ValidationError as e:
        print(f"❌ Invalid input: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"❌ Error: {e}")
        return EXIT_UNEXPECTED


def handle_generate(cfg, args):
    """Handle dataset generation"""
    result = cmd_generate(cfg, args.out, progress_callback=create_progress_callback())
    ds, grid = result.dataset, result.grid
    print(f"✅ Generated {ds.n} pairs (m={ds.m} sensors, p={ds.p} outputs)")
    print(f"Grid: {grid.n_points} points, {len(grid.boundary_idx)} boundary")
    print(f"Largest factorized matrix: {result.largest_factorization}")
    print("Timings:")
    print("-" * 40)
    for phase, seconds in result.timings.items():
        print(f"{phase:<20} {seconds:8.2f} s")
    if result.rejected:
        print(f"🔄 Redrew {result.rejected} fields with nonpositive conductivity")
    return EXIT_OK


def handle_train(cfg, args):
    """Handle training, optionally staged by group with a warm start"""
    dataset = args.dataset or cfg.run_dir / "dataset"
    result = cmd_train(cfg, dataset, args.out, warm_start=args.warm_start, group=args.group,
                       progress_callback=create_progress_callback(log_level=logging.DEBUG))
    rep = result.report
    print(f"✅ Trained on {result.n_train} functions ({rep.steps} steps, {rep.wall_clock:.1f} s)")
    print(f"Loss: {rep.initial_loss:.6e} -> {rep.final_loss:.6e}")
    print(f"Test R²: {rep.test_r2:.6f}" + (f" (published {cfg.benchmark.reference_test_r2})"
                                         if cfg.benchmark.reference_test_r2 else ""))
    print(f"📦 Model saved: {result.model_path}")
    return EXIT_OK


def handle_testfn(cfg, args):
    """Handle benchmark heat-source tests"""
    model = args.model or cfg.run_dir / "model"
    which = list(BENCHMARKS) if args.which == "all" else [args.which]
    print(f"{'case':<6} {'R²':>10} {'norm. L2':>12} {'published R²':>14}")
    print("-" * 46)
    for w in which:
        res = cmd_testfn(cfg, model, w, a=args.a, b=args.b, c_test=args.c_test, out=args.out, plot=not args.no_plot)
        m = res.metrics
        r2 = f"{m.r2:.6f}" if m.r2 is not None else "n/a"
        nl2 = f"{m.normalized_l2:.3e}" if m.normalized_l2 is not None else "n/a"
        ref = f"{res.reference_r2}" if res.reference_r2 is not None else "-"
        print(f"{w:<6} {r2:>10} {nl2:>12} {ref:>14}")
    return EXIT_OK


def handle_verify(cfg, args):
    """Handle oracle verification of a dataset"""
    dataset = args.dataset or cfg.run_dir / "dataset"
    result = cmd_verify(dataset, solve_cfg=cfg.solve if cfg else None, out=args.out, threshold=args.threshold,
                        progress_callback=create_progress_callback(log_level=logging.DEBUG))
    print(result.summary.to_string())
    status = "✅" if result.median <= args.threshold else "❌"
    print(f"{status} Median relative L2 {result.median:.3%}; {result.flagged} pair(s) above {args.threshold:.0%}")
    return EXIT_OK if result.median <= args.threshold else EXIT_NUMERIC


def handle_solve(cfg, args):
    """Handle a single oracle solve"""
    result = cmd_solve(cfg, args.source, which=args.which, out=args.out)
    print(f"✅ Solved {len(result.values)} points -> {result.path}")
    if result.relative_l2 is not None:
        print(f"Relative L2 vs analytic solution: {result.relative_l2:.3e}")
    return EXIT_OK


def handle_eval(cfg, args):
    """Handle model evaluation on a dataset split"""
    table = cmd_eval(args.model or cfg.run_dir / "model", args.dataset or cfg.run_dir / "dataset", cfg,
                     per_field=args.per_field, group=args.group)
    print(table.to_string())
    return EXIT_OK


def handle_plot(args):
    """Handle heatmap export"""
    written = cmd_plot([Path(f) for f in args.files], args.out, triptych=args.triptych)
    for path in written:
        print(f"✅ Wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
