import copy
import hashlib
import json
import logging
import math
from typing import Any, Dict, List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config/settings.yaml"

# every random draw in a run comes from one of these named streams
STREAM_IDS = {
    "data": 0,
    "init-features": 1,
    "init-head1": 2,
    "init-head2": 3,
    "batching": 4,
    "mixup": 5,
    "probe": 6,
}

SCENARIO_SPLITS = {
    "osda": (4, 0, 3),
    "opda": (4, 2, 3),
    "pda": (4, 2, 0),
    "closed": (4, 0, 0),
}


def substream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAM_IDS:
        raise ConfigError(f"Unknown random stream '{name}'")
    return np.random.default_rng([int(seed), STREAM_IDS[name]])


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class PerformanceSection(_Section):
    max_workers: int = Field(1, ge=1)
    cache_dir: Optional[str] = None


class RunSection(_Section):
    scenario: Literal["osda", "opda", "pda", "closed"] = "osda"
    seeds: List[int] = Field(default_factory=lambda: [0])
    out_dir: str = "runs/default"

    @field_validator("seeds")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v


class SplitSection(_Section):
    shared: Optional[int] = None
    src_private: Optional[int] = None
    tgt_private: Optional[int] = None


class ShiftSection(_Section):
    rotation: float = math.pi / 8
    translation: List[float] = Field(default_factory=lambda: [0.5, 0.5])
    scale: List[float] = Field(default_factory=lambda: [1.0])
    noise_sigma: float = Field(0.35, ge=0.0)
    class_sep: float = Field(2.0, gt=0.0)
    dims: int = Field(8, ge=2)
    per_class_n: int = Field(100, ge=2)
    unknown_radius: float = Field(0.2, gt=0.0, le=1.0)


class ModelSection(_Section):
    hidden_dims: List[int] = Field(default_factory=lambda: [32, 32])
    bottleneck_dim: int = Field(16, ge=1)
    use_bn: bool = True
    bn_momentum: float = Field(0.1, ge=0.0, le=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)


class LossSection(_Section):
    lam: float = Field(0.01, ge=0.0, alias="lambda")
    alpha: float = Field(0.1, ge=0.0, lt=1.0)
    T: float = Field(0.1, ge=0.0, le=1.0)
    prior: Literal["flatten", "uniform", "ema"] = "flatten"
    ema_momentum: float = Field(0.9, ge=0.0, lt=1.0)
    use_unk: bool = True
    use_diversity: bool = True


class OptimSection(_Section):
    lr0: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-3, ge=0.0)
    max_iters: int = Field(600, ge=1)
    batch_size: int = Field(64, ge=2)
    new_layer_lr_mult: float = Field(1.0, gt=0.0)
    log_every: int = Field(100, ge=1)


class ScoringSection(_Section):
    kind: Literal["inner_product", "l2_distance", "cosine_distance", "mean_entropy"] = "inner_product"
    slack_ratio: float = Field(0.1, ge=0.0)
    mixup_pairs: Optional[int] = Field(None, ge=1)
    w0: Optional[float] = None
    rho: Optional[float] = Field(None, ge=0.0)
    rejection: Optional[bool] = None
    reestimate_every: int = Field(0, ge=0)


class EvalSection(_Section):
    bins: int = Field(20, ge=2)


class VisualizationSection(_Section):
    enabled: bool = False
    show_plot: bool = False


class RunConfig(_Section):
    performance: PerformanceSection = Field(default_factory=PerformanceSection)
    run: RunSection = Field(default_factory=RunSection)
    split: SplitSection = Field(default_factory=SplitSection)
    shift: ShiftSection = Field(default_factory=ShiftSection)
    model: ModelSection = Field(default_factory=ModelSection)
    loss: LossSection = Field(default_factory=LossSection)
    source_optim: OptimSection = Field(default_factory=OptimSection)
    adapt_optim: OptimSection = Field(default_factory=OptimSection)
    scoring: ScoringSection = Field(default_factory=ScoringSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    visualization: VisualizationSection = Field(default_factory=VisualizationSection)

    @model_validator(mode="after")
    def _apply_scenario(self):
        shared, src_private, tgt_private = SCENARIO_SPLITS[self.run.scenario]
        if self.split.shared is None:
            self.split.shared = shared
        if self.split.src_private is None:
            self.split.src_private = src_private
        if self.split.tgt_private is None:
            self.split.tgt_private = tgt_private
        if self.split.shared < 1:
            raise ValueError("split.shared must be at least 1")
        if self.split.src_private < 0 or self.split.tgt_private < 0:
            raise ValueError("private class counts must be non-negative")

        if self.run.scenario in ("pda", "closed"):
            # no unknown classes to reject
            self.scoring.rejection = False
        elif self.scoring.rejection is None:
            self.scoring.rejection = True
        return self


def deep_merge(base: Dict, overrides: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_yaml(path: Optional[str], required: bool = False) -> Dict:
    if path is None:
        return {}
    try:
        with open(path, "r") as f:
            return yaml.safe_load(f) or {}
    except FileNotFoundError:
        if required:
            raise ConfigError(f"Config file not found at {path}")
        logger.warning(f"Config file not found at {path}. Using defaults.")
        return {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {path}: {e}")


def validate_config(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Validates a raw nested dict and returns the complete config with every default filled in."""
    try:
        return RunConfig.model_validate(raw or {}).model_dump(by_alias=True)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration:\n{e}")


def load_config(path: Optional[str] = DEFAULT_CONFIG_PATH, overrides: Optional[Dict] = None,
                required: bool = False) -> Dict[str, Any]:
    """
    Builds the run configuration: defaults < YAML file < overrides (CLI flags).
    Scenario presets are resolved here, so the returned dict fully determines a run.
    """
    raw = deep_merge(read_yaml(path, required=required), overrides or {})
    # a scenario switch must not inherit the split of the file's scenario
    if overrides and "scenario" in overrides.get("run", {}) and "split" not in overrides:
        raw.pop("split", None)
    return validate_config(raw)


def fingerprint(config: Dict[str, Any]) -> str:
    payload = copy.deepcopy(config)
    payload.get("run", {}).pop("out_dir", None)
    # worker count and cache location never change results
    payload.pop("performance", None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
