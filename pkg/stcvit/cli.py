"""
Command-line front end: generate, train, evaluate, ablate, forecast.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Summary lines go to stdout, logs to stderr.
"""

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    CHECKPOINT_NAME, DEFAULT_DT_HOURS, DEFAULT_LEADS, EPOCH_LOG_NAME, LOSS_BREAKDOWN_NAME, RESOLVED_CONFIG_NAME,
    SUPPORTED_REGIMES, SUPPORTED_VARIANTS,
)
from .data_pipeline import GridSequence, LatLonGrid, fit_input_normalization, generate_synthetic, make_windows, \
    split_by_time
from .gridfile import read_grid, write_grid
from .logger import logger
from .model import build_variant
from .run_config import RunConfig, RunConfigError, load_run_config
from .trainer import TrainResult, evaluate, forecast, lead_steps, train

COMPARISON_NAME = "comparison.csv"


class UsageError(Exception):
    pass


def _grid_shape(text: str):
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got '{text}'")
    return h, w


def _leads(text: str) -> List[float]:
    try:
        leads = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated hours, got '{text}'")
    if not leads:
        raise argparse.ArgumentTypeError("at least one lead is required")
    return leads


def _read_data(path: str) -> GridSequence:
    if not Path(path).exists():
        raise FileNotFoundError(f"Data file not found: {path}")
    return read_grid(path)


def _check_leads(leads: Sequence[float], dt_hours: float) -> None:
    for lead in leads:
        try:
            lead_steps(lead, dt_hours)
        except ValueError as e:
            raise UsageError(str(e)) from e


@dataclass
class TrainedRun:
    result: TrainResult
    checkpoint: Path
    test: GridSequence


def run_training(cfg: RunConfig, sequence: GridSequence, out_dir: Path) -> TrainedRun:
    """Split, normalize, train and write checkpoint, epoch log, loss breakdown and resolved config."""
    train_seq, val_seq, test_seq = split_by_time(sequence, cfg.train_fraction, cfg.val_fraction)
    if len(train_seq) < 3 or len(val_seq) < 3:
        raise UsageError(f"{len(sequence)} steps are too few for the configured train/val split")
    stats = fit_input_normalization(train_seq)
    model_config = cfg.model_settings(sequence.var_names, *sequence.grid.shape)
    model = build_variant(model_config)
    result = train(model, make_windows(train_seq), make_windows(val_seq), stats, sequence.grid, cfg.train_settings())

    out_dir.mkdir(parents=True, exist_ok=True)
    metadata = {
        "train_fraction": cfg.train_fraction,
        "val_fraction": cfg.val_fraction,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    }
    checkpoint = save_checkpoint(out_dir / CHECKPOINT_NAME, model, stats, metadata)
    result.epoch_log.to_csv(out_dir / EPOCH_LOG_NAME, index=False)
    (out_dir / LOSS_BREAKDOWN_NAME).write_text(json.dumps(result.breakdowns, indent=2), encoding="utf-8")
    (out_dir / RESOLVED_CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
    return TrainedRun(result, checkpoint, test_seq)


def cmd_generate(args: argparse.Namespace) -> int:
    h, w = args.grid
    try:
        grid = LatLonGrid.equiangular(h, w)
        sequence = generate_synthetic(grid, args.steps, args.seed, args.regime, shift_cells=args.shift,
                                      kappa=args.kappa, dt_hours=args.dt)
    except ValueError as e:
        raise UsageError(str(e)) from e
    size = write_grid(args.out, sequence)
    print(f"generated steps={len(sequence)} variables={len(sequence.var_names)} bytes={size} path={args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    sequence = _read_data(args.data)
    run = run_training(cfg, sequence, Path(args.out))
    r = run.result
    print(f"trained variant={cfg.variant} epochs={len(r.epoch_log)} steps={r.optimizer_steps} "
          f"best_epoch={r.best_epoch} best_val_loss={r.best_val_loss:.6g} checkpoint={run.checkpoint}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    sequence = _read_data(args.data)
    _check_leads(args.leads, sequence.dt_hours)
    if args.split == "test":
        meta = checkpoint.metadata
        sequence = split_by_time(sequence, meta.get("train_fraction", 0.8), meta.get("val_fraction", 0.1))[2]
    report = evaluate(checkpoint.model, sequence, checkpoint.stats, args.leads)
    report.to_csv(args.out)
    print(f"evaluated variant={checkpoint.config.variant} rows={len(report.rows)} path={args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    sequence = _read_data(args.data)
    _check_leads(cfg.leads, sequence.dt_hours)
    out_dir = Path(args.out)
    frames = []
    for variant in SUPPORTED_VARIANTS:
        logger.info(f"Ablation run {variant}", extra={"variant": variant})
        run = run_training(cfg.model_copy(update={"variant": variant}), sequence, out_dir / variant)
        trained = load_checkpoint(run.checkpoint)
        report = evaluate(trained.model, run.test, trained.stats, cfg.leads, include_persistence=False)
        frame = report.to_frame()
        frame["val_loss"] = run.result.best_val_loss
        frames.append(frame)
    comparison = pd.concat(frames, ignore_index=True)
    path = out_dir / COMPARISON_NAME
    comparison.to_csv(path, index=False)
    print(f"ablated variants={len(frames)} rows={len(comparison)} path={path}")
    return 0


def cmd_forecast(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    sequence = _read_data(args.data)
    if args.steps < 0 or args.start < 1 or args.start + args.steps >= len(sequence):
        raise UsageError(f"start={args.start} steps={args.steps} is outside a {len(sequence)}-step sequence")
    result = forecast(checkpoint.model, sequence, checkpoint.stats, args.start, args.steps)
    size = write_grid(args.out, result)
    print(f"forecast steps={len(result)} bytes={size} path={args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcvit", description="STC-ViT weather forecasting on gridded data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Write a synthetic grid file")
    p.add_argument("--grid", type=_grid_shape, default=(8, 16), help="H,W (default 8,16)")
    p.add_argument("--steps", type=int, default=200, help="Number of time steps (default 200)")
    p.add_argument("--seed", type=int, default=0, help="Random seed (default 0)")
    p.add_argument("--regime", choices=list(SUPPORTED_REGIMES), default="solid_rotation")
    p.add_argument("--dt", type=float, default=DEFAULT_DT_HOURS, help="Hours between steps (default 6)")
    p.add_argument("--shift", type=int, default=1, help="Zonal cells moved per step (default 1)")
    p.add_argument("--kappa", type=float, default=0.1, help="Diffusion strength for advection_diffusion")
    p.add_argument("--out", required=True, help="Output grid file")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="Train one model; writes checkpoint, epoch log and resolved config")
    p.add_argument("--config", help="key = value run config (default: desk preset)")
    p.add_argument("--data", required=True, help="Grid file")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="RMSE/ACC per variable and lead, with a persistence baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--leads", type=_leads, default=[float(v) for v in DEFAULT_LEADS],
                   help="Comma-separated lead hours (default %(default)s)")
    p.add_argument("--split", choices=["test", "all"], default="test",
                   help="Evaluate the held-out test range or the whole file (default test)")
    p.add_argument("--out", required=True, help="Metrics CSV")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="Train and evaluate all five variants")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("forecast", help="Autoregressive forecast written as a grid file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--start", type=int, required=True, help="Index of x_t0 in the data file")
    p.add_argument("--steps", type=int, required=True, help="Number of forecast steps")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_forecast)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.handler(args)
    except (UsageError, RunConfigError, FileNotFoundError) as e:
        print(f"stcvit {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True, extra={"command": args.command})
        print(f"stcvit {args.command}: failed: {e}", file=sys.stderr)
        return 1
