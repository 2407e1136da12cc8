#!/usr/bin/env python3
"""
Command-line front end of the adaptation lab.

    python lab/cli.py gen --out runs/data
    python lab/cli.py train-source --data runs/data/source.csv --out runs/src
    python lab/cli.py adapt --checkpoint runs/src/source_model.json --target runs/data/target.csv --out runs/adapt
    python lab/cli.py eval --checkpoint runs/adapt/adapted_model.json --target runs/data/target.csv --out runs/eval
    python lab/cli.py sweep --axis T --out runs/sweep_T
    python lab/cli.py run --scenario opda --seed 0 --seed 1 --seed 2

Exit codes: 0 success, 2 invalid configuration or input files, 3 runtime failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Add the parent directory to the Python path so we can import from src
parent_dir = Path(__file__).parent.parent
if str(parent_dir) not in sys.path:
    sys.path.insert(0, str(parent_dir))

from lab.runner import (ADAPT_LOG, ADAPTED_MODEL, REPORT, SCORES, SOURCE_DATA, SOURCE_LOG, SOURCE_MODEL,
                        SWEEP_AXES, SWEEP_DEFAULTS, TARGET_DATA, AdaptationLab, seed_dir)
from src.config import DEFAULT_CONFIG_PATH
from src.data_loader import load_dataset, save_dataset
from src.errors import EXIT_OK, exit_code_for
from src.model import load_checkpoint, save_checkpoint
from src.scorer import SCORE_KINDS, ThresholdBand

logger = logging.getLogger("AdaptationLab")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(os.path.join(out_dir, "lab.log")),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_overrides(args: argparse.Namespace) -> Dict:
    """Flag values that win over the config file."""
    overrides: Dict = {}

    def put(section: str, key: str, value):
        if value is not None:
            overrides.setdefault(section, {})[key] = value

    put("run", "scenario", args.scenario)
    put("run", "seeds", args.seed)
    put("run", "out_dir", args.out)
    put("scoring", "w0", args.w0)
    put("scoring", "slack_ratio", args.rho_ratio)
    put("scoring", "kind", args.score)
    put("loss", "lambda", args.lam)
    put("loss", "T", args.T)
    return overrides


def _data_path(path: str, default_name: str) -> str:
    return os.path.join(path, default_name) if os.path.isdir(path) else path


def cmd_gen(lab: AdaptationLab, out_dir: str) -> int:
    for seed in lab.seeds:
        path = seed_dir(out_dir, seed, len(lab.seeds))
        source, target = lab.generate(seed)
        save_dataset(source, os.path.join(path, SOURCE_DATA))
        save_dataset(target, os.path.join(path, TARGET_DATA))
        logger.info(f"Datasets for seed {seed} written to {path}")
    return EXIT_OK


def cmd_train_source(lab: AdaptationLab, data: str, out_dir: str) -> int:
    source = load_dataset(_data_path(data, SOURCE_DATA))
    for seed in lab.seeds:
        path = seed_dir(out_dir, seed, len(lab.seeds))
        model, log = lab.train_source(source, seed)
        save_checkpoint(model, os.path.join(path, SOURCE_MODEL), lab.loss_config(model.K).to_dict(),
                        lab.checkpoint_meta())
        log.save(os.path.join(path, SOURCE_LOG))
    return EXIT_OK


def cmd_adapt(lab: AdaptationLab, checkpoint: str, target_data: str, out_dir: str) -> int:
    target = load_dataset(_data_path(target_data, TARGET_DATA))
    for seed in lab.seeds:
        path = seed_dir(out_dir, seed, len(lab.seeds))
        model, _, _ = load_checkpoint(checkpoint)
        band = lab.fit_band(model, target.x, seed)
        before = lab.evaluate(model, target, band.w0, label="source")

        adapted, log = lab.adapt(model, target.x, band, seed)
        save_checkpoint(adapted, os.path.join(path, ADAPTED_MODEL), lab.loss_config(model.K).to_dict(),
                        lab.checkpoint_meta(band))
        log.save(os.path.join(path, ADAPT_LOG))
        lab.scorer.dump_scores(lab.scorer.score_samples(adapted, target.x), band, os.path.join(path, SCORES))

        after = lab.evaluate(adapted, target, band.w0, label="adapted")
        lab.write_reports(before, after, band, path)
    return EXIT_OK


def cmd_eval(lab: AdaptationLab, checkpoint: str, target_data: str, w0: Optional[float], out_dir: str) -> int:
    """
    Decision threshold: --w0 when given, else the one stored with the checkpoint,
    else a fresh mixup estimate on the target set.
    """
    target = load_dataset(_data_path(target_data, TARGET_DATA))
    model, _, meta = load_checkpoint(checkpoint)
    seed = lab.seeds[0]

    if not lab.scorer.rejection:
        band = ThresholdBand(0.0, 0.0)
    elif w0 is not None:
        band = ThresholdBand(float(w0), float(meta.get("rho", 0.0)))
    elif "w0" in meta:
        band = ThresholdBand(float(meta["w0"]), float(meta.get("rho", 0.0)))
    else:
        band = lab.fit_band(model, target.x, seed)

    report = lab.evaluate(model, target, band.w0, label=os.path.basename(checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    lab.write_reports(None, report, band, out_dir)
    logger.info(f"Report written to {os.path.join(out_dir, REPORT)}")
    return EXIT_OK


def cmd_sweep(lab: AdaptationLab, axis: str, values: Optional[List[str]], out_dir: str) -> int:
    table = lab.sweep(axis, values, out_dir)
    logger.info(f"Sweep over {axis}:\n{table.to_string(index=False)}")
    return EXIT_OK


def cmd_run(lab: AdaptationLab, out_dir: str) -> int:
    lab.run(out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help=f"Path to configuration file (default: {DEFAULT_CONFIG_PATH} when present)")
    common.add_argument("--seed", type=int, action="append", default=None,
                        help="Run seed; repeat the flag for several seeds")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument("--w0", type=float, default=None, help="Fixed score threshold, skips mixup estimation")
    common.add_argument("--rho-ratio", dest="rho_ratio", type=float, default=None,
                        help="Slack margin as a fraction of w0")
    common.add_argument("--score", type=str, choices=SCORE_KINDS, default=None, help="Score kind")
    common.add_argument("--scenario", type=str, choices=["osda", "opda", "pda", "closed"], default=None)
    common.add_argument("--lambda", dest="lam", type=float, default=None, help="Head orthogonality weight")
    common.add_argument("--T", dest="T", type=float, default=None, help="Flattening factor in [0, 1]")

    parser = argparse.ArgumentParser(description="Source-free universal domain adaptation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="Generate source and target datasets")

    p = sub.add_parser("train-source", parents=[common], help="Train the two-head source model")
    p.add_argument("--data", type=str, required=True, help="Source dataset file (or a directory holding source.csv)")

    p = sub.add_parser("adapt", parents=[common], help="Adapt a source checkpoint to unlabeled target data")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--target", type=str, required=True, help="Target dataset file (or a directory holding target.csv)")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on labeled target data")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--target", type=str, required=True)

    p = sub.add_parser("sweep", parents=[common], help="Run the full pipeline across one axis")
    p.add_argument("--axis", type=str, choices=SWEEP_AXES, required=True)
    p.add_argument("--values", type=str, nargs="+", default=None,
                   help=f"Axis values (defaults per axis: {SWEEP_DEFAULTS})")

    sub.add_parser("run", parents=[common], help="gen, train-source, adapt and eval in one go")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = build_overrides(args)

    try:
        config_path = args.config if args.config is not None else DEFAULT_CONFIG_PATH
        lab = AdaptationLab.from_file(config_path, overrides, required=args.config is not None)
    except Exception as e:
        setup_logging(args.out or "runs/default")
        code = exit_code_for(e)
        logger.error(f"{args.command} failed (exit {code}): {e}")
        return code

    out_dir = args.out or lab.config['run']['out_dir']
    setup_logging(out_dir)
    logger.info(f"{args.command}: config {config_path}, output in {out_dir}")

    try:
        if args.command == "gen":
            return cmd_gen(lab, out_dir)
        if args.command == "train-source":
            return cmd_train_source(lab, args.data, out_dir)
        if args.command == "adapt":
            return cmd_adapt(lab, args.checkpoint, args.target, out_dir)
        if args.command == "eval":
            return cmd_eval(lab, args.checkpoint, args.target, args.w0, out_dir)
        if args.command == "sweep":
            return cmd_sweep(lab, args.axis, args.values, out_dir)
        return cmd_run(lab, out_dir)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed (exit {code}): {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
