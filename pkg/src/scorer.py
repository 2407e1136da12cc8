import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import entr

from src.config import substream
from src.errors import ConfigError
from src.tensor import Tensor

logger = logging.getLogger(__name__)

SCORE_KINDS = ("inner_product", "l2_distance", "cosine_distance", "mean_entropy")

TAG_PLUS = "+"
TAG_MINUS = "-"
TAG_BAND = "band"


@dataclass(frozen=True)
class ThresholdBand:
    """
    Scores above w0 + rho count as known, below w0 - rho as unknown; the rest is ignored.

    Any finite w0 is accepted since distance and entropy scores are negative. The
    inner-product range check (w0 - rho >= 0) is applied where the score kind is known,
    in ScoringEngine.fit_band.
    """
    w0: float
    rho: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.w0):
            raise ValueError(f"w0 must be finite, got {self.w0}")
        if not (math.isfinite(self.rho) and self.rho >= 0):
            raise ValueError(f"rho must be a finite non-negative number, got {self.rho}")

    @property
    def lower(self) -> float:
        return self.w0 - self.rho

    @property
    def upper(self) -> float:
        return self.w0 + self.rho

    def to_dict(self) -> dict:
        return {"w0": self.w0, "rho": self.rho}


def _as_array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def iscore(p1, p2) -> float:
    """Inner product of the two heads' probability vectors."""
    return float(np.dot(_as_array(p1), _as_array(p2)))


def score_batch(kind: str, p1, p2) -> np.ndarray:
    """
    Row-wise scores for (N, K) probability matrices, oriented so that higher means more likely known.
    """
    if kind not in SCORE_KINDS:
        raise ValueError(f"Unknown score kind '{kind}'. Expected one of {SCORE_KINDS}")
    p1 = np.atleast_2d(_as_array(p1))
    p2 = np.atleast_2d(_as_array(p2))
    if p1.shape != p2.shape:
        raise ValueError(f"head outputs differ in shape: {p1.shape} vs {p2.shape}")

    if kind == "inner_product":
        return np.sum(p1 * p2, axis=1)
    if kind == "l2_distance":
        return -np.linalg.norm(p1 - p2, axis=1)
    if kind == "cosine_distance":
        return np.sum(p1 * p2, axis=1) / (np.linalg.norm(p1, axis=1) * np.linalg.norm(p2, axis=1))
    # mean_entropy
    return -0.5 * (entr(p1).sum(axis=1) + entr(p2).sum(axis=1))


def alt_score(kind: str, p1, p2) -> float:
    return float(score_batch(kind, p1, p2)[0])


def estimate_threshold(model, target_x: np.ndarray, pairs: Optional[int] = None, seed: int = 0,
                       kind: str = "inner_product") -> float:
    """
    Mean score of 0.5/0.5 input-space mixtures of random target pairs (i != j), scored by
    the model in eval mode. ``pairs`` defaults to the number of target samples.
    """
    target_x = np.asarray(target_x, dtype=np.float64)
    n = target_x.shape[0]
    if n < 2:
        raise ValueError(f"threshold estimation needs at least 2 target samples, got {n}")
    pairs = n if pairs is None else int(pairs)
    if pairs < 1:
        raise ValueError(f"pairs must be positive, got {pairs}")

    rng = substream(seed, "mixup")
    i = rng.integers(0, n, size=pairs)
    # offset in [1, n-1] keeps j != i
    j = (i + rng.integers(1, n, size=pairs)) % n
    mixed = 0.5 * target_x[i] + 0.5 * target_x[j]

    p1, p2 = model.predict_probs(mixed)
    return float(np.mean(score_batch(kind, p1, p2)))


def partition(scores: Sequence[float], band: ThresholdBand) -> Tuple[List[int], List[int], List[int]]:
    """Splits sample indices into (plus, minus, band); boundary ties land in the band."""
    scores = np.asarray(scores, dtype=np.float64)
    plus = scores > band.upper
    minus = scores < band.lower
    ignored = ~(plus | minus)
    return (np.flatnonzero(plus).tolist(), np.flatnonzero(minus).tolist(),
            np.flatnonzero(ignored).tolist())


def slack_from_threshold(w0: float, ratio: float = 0.1) -> float:
    if ratio < 0:
        raise ValueError(f"slack ratio must be >= 0, got {ratio}")
    # distance-type scores are negative, the band width follows the magnitude
    return ratio * abs(w0)


class ScoringEngine:
    def __init__(self, config: dict):
        self.kind = config.get('kind', 'inner_product')
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"Unknown score kind '{self.kind}'. Expected one of {SCORE_KINDS}")
        self.slack_ratio = config.get('slack_ratio', 0.1)
        self.mixup_pairs = config.get('mixup_pairs')
        self.fixed_w0 = config.get('w0')
        self.fixed_rho = config.get('rho')
        rejection = config.get('rejection')
        self.rejection = True if rejection is None else bool(rejection)
        self.reestimate_every = config.get('reestimate_every', 0)

    def score_probs(self, p1, p2) -> np.ndarray:
        return score_batch(self.kind, p1, p2)

    def score_samples(self, model, x: np.ndarray) -> np.ndarray:
        p1, p2 = model.predict_probs(np.asarray(x, dtype=np.float64))
        return self.score_probs(p1, p2)

    def fit_band(self, model, target_x: np.ndarray, seed: int = 0) -> ThresholdBand:
        """
        Threshold band for adaptation. With rejection disabled w0 = rho = 0 and every
        sample is treated as known.
        """
        if not self.rejection:
            logger.info("Rejection disabled: w0=0, rho=0, every target sample counts as known")
            return ThresholdBand(0.0, 0.0)

        if self.fixed_w0 is not None:
            w0 = float(self.fixed_w0)
            logger.info(f"Using fixed w0={w0:.6f}, skipping mixup estimation")
        else:
            w0 = estimate_threshold(model, target_x, pairs=self.mixup_pairs, seed=seed, kind=self.kind)
            logger.info(f"Mixup threshold estimate ({self.kind}): w0={w0:.6f}")

        rho = float(self.fixed_rho) if self.fixed_rho is not None else slack_from_threshold(w0, self.slack_ratio)
        band = ThresholdBand(w0, rho)
        if self.kind == "inner_product" and band.lower < 0:
            raise ConfigError(f"inner_product scores are non-negative, but w0 - rho = {band.lower:.6f} "
                              f"(w0={band.w0}, rho={band.rho})")
        logger.info(f"Score band: w0={band.w0:.6f} rho={band.rho:.6f}")
        return band

    def partition(self, scores: Sequence[float], band: ThresholdBand) -> Tuple[List[int], List[int], List[int]]:
        if not self.rejection:
            return list(range(len(scores))), [], []
        return partition(scores, band)

    def tags(self, scores: Sequence[float], band: ThresholdBand) -> List[str]:
        plus, minus, _ = self.partition(scores, band)
        tags = [TAG_BAND] * len(scores)
        for i in plus:
            tags[i] = TAG_PLUS
        for i in minus:
            tags[i] = TAG_MINUS
        return tags

    def dump_scores(self, scores: Sequence[float], band: ThresholdBand, path: str) -> pd.DataFrame:
        """Writes index,score,tag rows; scores keep full float64 precision."""
        scores = np.asarray(scores, dtype=np.float64)
        df = pd.DataFrame({
            "index": np.arange(scores.size),
            "score": scores,
            "tag": self.tags(scores, band),
        })
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logger.info(f"Score dump written to {path} ({scores.size} samples)")
        return df
