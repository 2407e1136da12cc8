import copy
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

# Add the parent directory to the Python path so we can import from src
parent_dir = Path(__file__).parent.parent
if str(parent_dir) not in sys.path:
    sys.path.insert(0, str(parent_dir))

from src.config import deep_merge, fingerprint, load_config, validate_config
from src.data_loader import DataEngine, save_dataset
from src.errors import ConfigError
from src.evaluator import AdaptationReport, evaluate
from src.generator import DatasetBundle, ShiftSpec, SplitSpec
from src.losses import LossConfig
from src.model import TwoHeadModel, save_checkpoint
from src.scorer import ScoringEngine, ThresholdBand
from src.trainer import OptimConfig, TrainLog, adapt_target, train_source
from src.visualizer import Visualizer

logger = logging.getLogger("AdaptationLab")

SWEEP_AXES = ("unknown_classes", "rho_ratio", "T", "score_kind", "prior", "ablation", "lambda")

SWEEP_DEFAULTS = {
    "unknown_classes": [1, 3, 5],
    "rho_ratio": [0.0, 0.01, 0.05, 0.1, 0.2, 0.5],
    "T": [round(0.1 * i, 1) for i in range(11)],
    "score_kind": ["inner_product", "l2_distance", "cosine_distance", "mean_entropy"],
    "prior": ["flatten", "uniform", "ema"],
    "ablation": ["full", "no_orth", "no_diversity", "no_unk"],
    "lambda": [0.0, 0.001, 0.01, 0.1],
}

ABLATIONS = {
    "full": {},
    "no_orth": {"loss": {"lambda": 0.0}},
    "no_diversity": {"loss": {"use_diversity": False}},
    "no_unk": {"loss": {"use_unk": False}},
}

# stable output names inside a run directory
SOURCE_DATA = "source.csv"
TARGET_DATA = "target.csv"
SOURCE_MODEL = "source_model.json"
SOURCE_LOG = "source_log.csv"
ADAPTED_MODEL = "adapted_model.json"
ADAPT_LOG = "adapt_log.csv"
SCORES = "scores.csv"
REPORT_SOURCE = "report_source.json"
REPORT_ADAPTED = "report_adapted.json"
REPORT = "report.json"


def parse_axis_value(axis: str, value: Any) -> Any:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"Unknown sweep axis '{axis}'. Expected one of {SWEEP_AXES}")
    try:
        if axis == "unknown_classes":
            return int(value)
        if axis in ("rho_ratio", "T", "lambda"):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value {value!r} for sweep axis '{axis}'")
    if axis == "ablation" and value not in ABLATIONS:
        raise ConfigError(f"Unknown ablation '{value}'. Expected one of {tuple(ABLATIONS)}")
    return str(value)


def apply_axis(config: Dict, axis: str, value: Any) -> Dict:
    """Returns a validated copy of config with one sweep axis set to value."""
    value = parse_axis_value(axis, value)
    if axis == "unknown_classes":
        override = {"split": {"tgt_private": value}}
    elif axis == "rho_ratio":
        override = {"scoring": {"slack_ratio": value}}
    elif axis == "T":
        override = {"loss": {"T": value}}
    elif axis == "score_kind":
        override = {"scoring": {"kind": value}}
    elif axis == "prior":
        override = {"loss": {"prior": value}}
    elif axis == "lambda":
        override = {"loss": {"lambda": value}}
    else:
        override = ABLATIONS[value]
    return validate_config(deep_merge(config, override))


def seed_dir(out_dir: str, seed: int, n_seeds: int) -> str:
    path = out_dir if n_seeds == 1 else os.path.join(out_dir, f"seed_{seed}")
    os.makedirs(path, exist_ok=True)
    return path


# External helper function for parallel processing
def run_trial(config: Dict, seed: int, out_dir: str) -> Dict[str, Any]:
    """
    Full pipeline for one (config, seed). Runs in a separate process during sweeps,
    so failures are reported in the result instead of raised.
    """
    try:
        return AdaptationLab(config).run_seed(seed, out_dir)
    except Exception as e:
        logging.getLogger("AdaptationLab").error(f"Trial seed={seed} in {out_dir} failed: {e}")
        return {"seed": seed, "score_after": math.nan, "error": str(e)}


class AdaptationLab:
    def __init__(self, config: Optional[Dict] = None):
        self.config = validate_config(config or {})
        self.fingerprint = fingerprint(self.config)
        self.split = SplitSpec.from_config(self.config['split'])
        self.shift = ShiftSpec.from_config(self.config['shift'])
        self.data_engine = DataEngine(self.config.get('performance', {}))
        self.scorer = ScoringEngine(self.config.get('scoring', {}))

    @classmethod
    def from_file(cls, config_path: str = "config/settings.yaml", overrides: Optional[Dict] = None,
                  required: bool = False) -> "AdaptationLab":
        return cls(load_config(config_path, overrides, required=required))

    @property
    def seeds(self) -> List[int]:
        return list(self.config['run']['seeds'])

    def loss_config(self, K: int) -> LossConfig:
        return LossConfig.from_config(self.config.get('loss', {}), K)

    # --- pipeline steps ---

    def generate(self, seed: int) -> Tuple[DatasetBundle, DatasetBundle]:
        return self.data_engine.get_datasets(self.split, self.shift, seed)

    def train_source(self, source: DatasetBundle, seed: int) -> Tuple[TwoHeadModel, TrainLog]:
        K = len(source.label_set)
        model = TwoHeadModel.from_config(self.config.get('model', {}), source.dims, K, seed=seed)
        optim = OptimConfig.from_config(self.config.get('source_optim', {}), seed=seed)
        log = train_source(model, source, self.loss_config(K), optim)
        return model, log

    def fit_band(self, model: TwoHeadModel, target_x: np.ndarray, seed: int) -> ThresholdBand:
        return self.scorer.fit_band(model.snapshot(), target_x, seed=seed)

    def adapt(self, model: TwoHeadModel, target_x: np.ndarray, band: ThresholdBand,
              seed: int) -> Tuple[TwoHeadModel, TrainLog]:
        """Adapts a copy of model; the source model itself is left untouched."""
        adapted = copy.deepcopy(model)
        optim = OptimConfig.from_config(self.config.get('adapt_optim', {}), seed=seed)
        log = adapt_target(adapted, target_x, band, self.loss_config(model.K), optim, scorer=self.scorer)
        return adapted, log

    def evaluate(self, model: TwoHeadModel, target: DatasetBundle, w0: float, label: str = "") -> AdaptationReport:
        known_set = [c for c in target.label_set if c < model.K]
        return evaluate(
            model, target, w0, known_set,
            bins=self.config['eval']['bins'],
            kind=self.scorer.kind,
            rejection=self.scorer.rejection,
            config_fingerprint=self.fingerprint,
            label=label,
        )

    def checkpoint_meta(self, band: Optional[ThresholdBand] = None) -> Dict[str, Any]:
        meta = {"config_fingerprint": self.fingerprint, "score_kind": self.scorer.kind,
                "rejection": self.scorer.rejection}
        if band is not None:
            meta.update(band.to_dict())
        return meta

    def write_reports(self, before: Optional[AdaptationReport], after: AdaptationReport,
                      band: ThresholdBand, out_dir: str):
        if before is not None:
            before.save(os.path.join(out_dir, REPORT_SOURCE))
            after.save(os.path.join(out_dir, REPORT_ADAPTED))
        after.save(os.path.join(out_dir, REPORT))
        after.save_histograms(out_dir)

        if self.config['visualization']['enabled']:
            visualizer = Visualizer({
                'charts_output_dir': os.path.join(out_dir, 'charts'),
                'show_plot': self.config['visualization']['show_plot'],
            })
            visualizer.create_histogram_chart(before or after, after if before is not None else None, band)

    def run_seed(self, seed: int, out_dir: str) -> Dict[str, Any]:
        """gen -> train-source -> adapt -> eval for one seed, every artifact written to out_dir."""
        os.makedirs(out_dir, exist_ok=True)
        logger.info(f"Running {self.config['run']['scenario']} pipeline for seed {seed} into {out_dir}")

        source, target = self.generate(seed)
        save_dataset(source, os.path.join(out_dir, SOURCE_DATA))
        save_dataset(target, os.path.join(out_dir, TARGET_DATA))

        model, source_log = self.train_source(source, seed)
        loss_cfg = self.loss_config(model.K).to_dict()
        save_checkpoint(model, os.path.join(out_dir, SOURCE_MODEL), loss_cfg, self.checkpoint_meta())
        source_log.save(os.path.join(out_dir, SOURCE_LOG))

        band = self.fit_band(model, target.x, seed)
        before = self.evaluate(model, target, band.w0, label="source")

        adapted, adapt_log = self.adapt(model, target.x, band, seed)
        save_checkpoint(adapted, os.path.join(out_dir, ADAPTED_MODEL), loss_cfg, self.checkpoint_meta(band))
        adapt_log.save(os.path.join(out_dir, ADAPT_LOG))
        self.scorer.dump_scores(self.scorer.score_samples(adapted, target.x), band, os.path.join(out_dir, SCORES))

        after = self.evaluate(adapted, target, band.w0, label="adapted")
        self.write_reports(before, after, band, out_dir)

        return {
            "seed": seed,
            "w0": band.w0,
            "rho": band.rho,
            "score_before": before.score,
            "score_after": after.score,
            "hos_before": before.hos,
            "hos_after": after.hos,
            "separation_before": before.separation,
            "separation_after": after.separation,
            "degenerate_band": adapt_log.degenerate_band,
            "error": "",
        }

    def run(self, out_dir: Optional[str] = None) -> List[Dict[str, Any]]:
        out_dir = out_dir or self.config['run']['out_dir']
        results = [self.run_seed(seed, seed_dir(out_dir, seed, len(self.seeds))) for seed in self.seeds]
        scores = [r["score_after"] for r in results]
        logger.info(f"Mean score over {len(results)} seed(s): {np.mean(scores):.2f}")
        return results

    # --- sweeps ---

    def sweep(self, axis: str, values: Optional[Sequence[Any]] = None, out_dir: Optional[str] = None) -> pd.DataFrame:
        """
        Full pipeline per (value, seed). Rows are sorted by value then seed before aggregation,
        so the table does not depend on completion order.
        """
        values = [parse_axis_value(axis, v) for v in (values if values is not None else SWEEP_DEFAULTS[axis])]
        if not values:
            raise ConfigError(f"sweep over '{axis}' needs at least one value")
        out_dir = out_dir or self.config['run']['out_dir']
        os.makedirs(out_dir, exist_ok=True)

        tasks = []
        for vi, value in enumerate(values):
            config = apply_axis(self.config, axis, value)
            for seed in self.seeds:
                path = os.path.join(out_dir, f"{axis}={value}", f"seed_{seed}")
                tasks.append((vi, value, seed, config, path))

        total = len(tasks)
        max_workers = self.config.get('performance', {}).get('max_workers', 1)
        logger.info(f"Starting sweep over {axis} ({len(values)} values x {len(self.seeds)} seeds) "
                    f"with {max_workers} worker(s)...")

        results = []
        if max_workers <= 1:
            for i, (vi, value, seed, config, path) in enumerate(tasks, 1):
                results.append((vi, value, seed, run_trial(config, seed, path)))
                logger.info(f"SWEEP_PROGRESS: {i}/{total}")
        else:
            with ProcessPoolExecutor(max_workers=max_workers) as executor:
                futures = {
                    executor.submit(run_trial, config, seed, path): (vi, value, seed)
                    for vi, value, seed, config, path in tasks
                }
                for i, future in enumerate(as_completed(futures), 1):
                    vi, value, seed = futures[future]
                    results.append((vi, value, seed, future.result()))
                    logger.info(f"SWEEP_PROGRESS: {i}/{total}")

        results.sort(key=lambda r: (r[0], r[2]))
        table = self._aggregate(values, results)
        path = os.path.join(out_dir, f"sweep_{axis}.csv")
        table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logger.info(f"Sweep table written to {path}")
        return table

    def _aggregate(self, values: Sequence[Any], results: List[Tuple]) -> pd.DataFrame:
        rows = []
        for vi, value in enumerate(values):
            row = {"value": value}
            per_seed = [r for r in results if r[0] == vi]
            scores = [res["score_after"] for _, _, _, res in per_seed]
            finite = [s for s in scores if s is not None and not math.isnan(s)]
            row["mean_hos"] = float(np.mean(finite)) if finite else math.nan
            for (_, _, seed, res), s in zip(per_seed, scores):
                row[f"hos_seed{seed}"] = s
            errors = [res.get("error", "") for _, _, _, res in per_seed if res.get("error")]
            row["error"] = "; ".join(errors)
            rows.append(row)
        return pd.DataFrame(rows)
