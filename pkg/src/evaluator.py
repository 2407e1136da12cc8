import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.special import softmax
from sklearn.metrics import confusion_matrix

from src.config import substream
from src.errors import ConfigError
from src.generator import DatasetBundle
from src.scorer import score_batch
from src.version_manager import VersionManager

logger = logging.getLogger(__name__)

UNKNOWN = -1
WELL_TRAINED_CUTOFF = 0.95

_nullable_number = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "tool_version", "metrics", "per_class", "confusion",
                 "histogram", "w0", "config_fingerprint"],
    "properties": {
        "schema_version": {"type": "string"},
        "tool_version": {"type": "string"},
        "label": {"type": "string"},
        "score_kind": {"type": "string"},
        "rejection": {"type": "boolean"},
        "w0": {"type": "number"},
        "config_fingerprint": {"type": "string"},
        "metrics": {
            "type": "object",
            "required": ["acc_kn", "acc_ukn", "hos", "score"],
            "properties": {
                "acc_kn": _nullable_number,
                "acc_ukn": _nullable_number,
                "hos": _nullable_number,
                "score": {"type": "number"},
                "mean_score_known": _nullable_number,
                "mean_score_unknown": _nullable_number,
            },
        },
        "per_class": {"type": "object", "additionalProperties": {"type": "number"}},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "histogram": {
            "type": "object",
            "required": ["edges", "known", "unknown"],
            "properties": {
                "edges": {"type": "array", "items": {"type": "number"}},
                "known": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "unknown": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
    },
}


def hos(acc_kn: float, acc_ukn: float) -> float:
    """Harmonic mean of known and unknown accuracy (percent); 0 when both are 0."""
    if acc_kn + acc_ukn == 0:
        return 0.0
    return 2.0 * acc_kn * acc_ukn / (acc_kn + acc_ukn)


def decide(p1: np.ndarray, p2: np.ndarray, w0: float, kind: str = "inner_product",
           rejection: bool = True) -> np.ndarray:
    """Per row: UNKNOWN when the score is below w0, otherwise the argmax of the head mean (lowest index on ties)."""
    p1, p2 = np.atleast_2d(p1), np.atleast_2d(p2)
    labels = np.argmax(0.5 * (p1 + p2), axis=1)
    if rejection:
        labels = np.where(score_batch(kind, p1, p2) < w0, UNKNOWN, labels)
    return labels


def classify_batch(model, x: np.ndarray, w0: float, kind: str = "inner_product",
                   rejection: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (labels, scores) for every row of x, using the model in eval mode."""
    p1, p2 = model.predict_probs(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return decide(p1, p2, w0, kind, rejection), score_batch(kind, p1, p2)


def classify(model, x: np.ndarray, w0: float, kind: str = "inner_product", rejection: bool = True) -> int:
    labels, _ = classify_batch(model, np.asarray(x, dtype=np.float64).reshape(1, -1), w0, kind, rejection)
    return int(labels[0])


def score_histogram(scores: Sequence[float], is_known: Sequence[bool], bins: int = 20,
                    value_range: Tuple[float, float] = (0.0, 1.0)) -> Dict[str, List]:
    """Equal-width bins over value_range; out-of-range scores are clipped into the edge bins."""
    if bins < 2:
        raise ValueError(f"bins must be at least 2, got {bins}")
    scores = np.clip(np.asarray(scores, dtype=np.float64), *value_range)
    is_known = np.asarray(is_known, dtype=bool)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    known, _ = np.histogram(scores[is_known], bins=edges)
    unknown, _ = np.histogram(scores[~is_known], bins=edges)
    return {"edges": edges.tolist(), "known": known.astype(int).tolist(), "unknown": unknown.astype(int).tolist()}


def _histogram_range(kind: str, scores: np.ndarray) -> Tuple[float, float]:
    if kind in ("inner_product", "cosine_distance"):
        return 0.0, 1.0
    lo, hi = float(scores.min()), float(scores.max())
    return (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)


@dataclass
class AdaptationReport:
    acc_kn: Optional[float]
    acc_ukn: Optional[float]
    hos: Optional[float]
    per_class: Dict[str, float]
    confusion: List[List[int]]
    histogram: Dict[str, List]
    w0: float
    config_fingerprint: str = ""
    score_kind: str = "inner_product"
    rejection: bool = True
    label: str = ""
    mean_score_known: Optional[float] = None
    mean_score_unknown: Optional[float] = None
    schema_version: str = field(default_factory=VersionManager.report_schema_version)
    tool_version: str = field(default_factory=VersionManager.tool_version)

    @property
    def score(self) -> float:
        """HOS when unknowns exist, known-class accuracy otherwise."""
        if self.hos is not None:
            return self.hos
        return self.acc_kn if self.acc_kn is not None else self.acc_ukn

    @property
    def separation(self) -> Optional[float]:
        if self.mean_score_known is None or self.mean_score_unknown is None:
            return None
        return self.mean_score_known - self.mean_score_unknown

    def to_dict(self) -> Dict:
        return {
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "label": self.label,
            "score_kind": self.score_kind,
            "rejection": self.rejection,
            "w0": self.w0,
            "config_fingerprint": self.config_fingerprint,
            "metrics": {
                "acc_kn": self.acc_kn,
                "acc_ukn": self.acc_ukn,
                "hos": self.hos,
                "score": self.score,
                "mean_score_known": self.mean_score_known,
                "mean_score_unknown": self.mean_score_unknown,
            },
            "per_class": self.per_class,
            "confusion": self.confusion,
            "histogram": self.histogram,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "AdaptationReport":
        jsonschema.validate(payload, REPORT_SCHEMA)
        metrics = payload["metrics"]
        return cls(
            acc_kn=metrics["acc_kn"],
            acc_ukn=metrics["acc_ukn"],
            hos=metrics["hos"],
            per_class=payload["per_class"],
            confusion=payload["confusion"],
            histogram=payload["histogram"],
            w0=payload["w0"],
            config_fingerprint=payload["config_fingerprint"],
            score_kind=payload.get("score_kind", "inner_product"),
            rejection=payload.get("rejection", True),
            label=payload.get("label", ""),
            mean_score_known=metrics.get("mean_score_known"),
            mean_score_unknown=metrics.get("mean_score_unknown"),
            schema_version=payload["schema_version"],
            tool_version=payload["tool_version"],
        )

    def save(self, path: str):
        payload = self.to_dict()
        jsonschema.validate(payload, REPORT_SCHEMA)
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        logger.info(f"Report written to {path}")

    @classmethod
    def load(cls, path: str) -> "AdaptationReport":
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        found = payload.get("schema_version", "")
        if not VersionManager.is_compatible(found):
            raise ConfigError(f"{path}: report schema {found!r} is not compatible with "
                              f"{VersionManager.report_schema_version()}")
        return cls.from_dict(payload)

    def save_histograms(self, out_dir: str, prefix: str = "hist"):
        """Two-column tables (bin_center,count) per ground-truth group."""
        edges = np.asarray(self.histogram["edges"])
        centers = 0.5 * (edges[:-1] + edges[1:])
        for group in ("known", "unknown"):
            path = os.path.join(out_dir, f"{prefix}_{group}.csv")
            pd.DataFrame({"bin_center": centers, "count": self.histogram[group]}).to_csv(
                path, index=False, float_format="%.17g", lineterminator="\n")


def evaluate_predictions(y_true: Sequence[int], predictions: Sequence[int], scores: Sequence[float],
                         known_set: Sequence[int], K: int, w0: float, bins: int = 20,
                         kind: str = "inner_product", rejection: bool = True,
                         config_fingerprint: str = "", label: str = "") -> AdaptationReport:
    """
    Builds the report from ground truth and decisions. Ground-truth classes outside known_set
    and UNKNOWN decisions both map to column/row K of the confusion matrix.
    """
    y_true = np.asarray(y_true, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    known_set = sorted(int(c) for c in known_set)
    if any(c < 0 or c >= K for c in known_set):
        raise ValueError(f"known classes {known_set} must be head indices below K={K}")

    is_known = np.isin(y_true, known_set)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty target set")
    truth = np.where(is_known, y_true, K)
    pred = np.where(predictions == UNKNOWN, K, predictions)
    cm = confusion_matrix(truth, pred, labels=list(range(K + 1)))

    per_class = {}
    for c in known_set:
        total = cm[c].sum()
        if total > 0:
            per_class[str(c)] = float(100.0 * cm[c, c] / total)
    acc_kn = float(np.mean(list(per_class.values()))) if per_class else None
    n_unknown = cm[K].sum()
    acc_ukn = float(100.0 * cm[K, K] / n_unknown) if n_unknown > 0 else None
    if acc_kn is None and acc_ukn is None:
        raise ValueError("target set has neither known nor unknown samples")
    if acc_ukn is not None:
        per_class["unknown"] = acc_ukn

    report = AdaptationReport(
        acc_kn=acc_kn,
        acc_ukn=None if acc_ukn is None else float(acc_ukn),
        hos=hos(acc_kn, acc_ukn) if acc_kn is not None and acc_ukn is not None else None,
        per_class=per_class,
        confusion=cm.astype(int).tolist(),
        histogram=score_histogram(scores, is_known, bins, _histogram_range(kind, scores)),
        w0=float(w0),
        config_fingerprint=config_fingerprint,
        score_kind=kind,
        rejection=rejection,
        label=label,
        mean_score_known=float(scores[is_known].mean()) if is_known.any() else None,
        mean_score_unknown=float(scores[~is_known].mean()) if (~is_known).any() else None,
    )
    return report


def evaluate(model, target: DatasetBundle, w0: float, known_set: Sequence[int], bins: int = 20,
             kind: str = "inner_product", rejection: bool = True, config_fingerprint: str = "",
             label: str = "") -> AdaptationReport:
    predictions, scores = classify_batch(model, target.x, w0, kind, rejection)
    report = evaluate_predictions(target.y, predictions, scores, known_set, model.K, w0, bins, kind,
                                  rejection, config_fingerprint, label)
    logger.info(
        f"Evaluation {label or ''}: acc_kn={_fmt(report.acc_kn)} acc_ukn={_fmt(report.acc_ukn)} "
        f"hos={_fmt(report.hos)} (w0={w0:.6f})"
    )
    return report


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.2f}"


# --- well-trained feature probe ---

@dataclass
class ProbeRow:
    threshold: float
    mean_distance: float
    n_probes: int
    empty: bool = False


def softmax_norm(W: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.linalg.norm(softmax(np.atleast_2d(z) @ W, axis=1), axis=1)


def default_probe_setup(seed: int = 0, d: int = 4, K: int = 3, n_source: int = 2000,
                        n_probes: int = 4000, radius: float = 6.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random bias-free linear classifier plus source features and probes scattered as r * u, r ~ U(0, radius)."""
    rng = substream(seed, "probe")
    W = rng.normal(0.0, 1.0, size=(d, K))

    def scatter(n: int) -> np.ndarray:
        u = rng.normal(size=(n, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return u * rng.uniform(0.0, radius, size=(n, 1))

    return W, scatter(n_source), scatter(n_probes)


def lemma_probe(W: np.ndarray, source_feats: np.ndarray, thresholds: Sequence[float],
                probes: Optional[np.ndarray] = None, cutoff: float = WELL_TRAINED_CUTOFF,
                seed: int = 0) -> List[ProbeRow]:
    """
    For each threshold t: mean over probes z with ||softmax(W^T z)|| >= t of the smallest cosine
    distance from z to the well-trained source features (softmax norm >= cutoff).
    Probes are drawn once and filtered per threshold.
    """
    W = np.asarray(W, dtype=np.float64)
    source_feats = np.asarray(source_feats, dtype=np.float64)
    well_trained = source_feats[softmax_norm(W, source_feats) >= cutoff]
    if well_trained.shape[0] == 0:
        raise ValueError(f"no source feature reaches the well-trained cutoff {cutoff}")
    if probes is None:
        _, _, probes = default_probe_setup(seed=seed, d=W.shape[0], K=W.shape[1])

    probe_norms = softmax_norm(W, probes)
    # probes below every threshold never enter a mean
    candidates = probe_norms >= min(thresholds)
    nearest = np.full(probes.shape[0], np.nan)
    if candidates.any():
        nearest[candidates] = cdist(probes[candidates], well_trained, metric="cosine").min(axis=1)

    rows = []
    for t in thresholds:
        mask = probe_norms >= t
        if not mask.any():
            logger.warning(f"No probe reaches softmax norm {t}")
            rows.append(ProbeRow(float(t), math.nan, 0, empty=True))
            continue
        rows.append(ProbeRow(float(t), float(nearest[mask].mean()), int(mask.sum())))
    return rows
