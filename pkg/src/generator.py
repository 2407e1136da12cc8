"""
Synthetic source/target datasets with a controllable domain shift and category shift.

Source classes sit evenly on a circle of radius ``class_sep`` in the first two feature
dimensions; the remaining dimensions carry noise only. Target samples of shared classes
come from the same prototypes moved by the shift (rotation, then per-axis scale, then
translation). Target-private classes sit on a smaller ring of radius
``class_sep * unknown_radius`` at the source decision-boundary angles and are moved by
the same shift. A source model sees them between its classes, so the uncertainty score
has to do the rejection.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from src.config import substream
from src.errors import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

DOMAINS = ("source", "target")


@dataclass(frozen=True)
class SplitSpec:
    shared: int
    src_private: int = 0
    tgt_private: int = 0

    def __post_init__(self):
        if self.shared < 1:
            raise ConfigError(f"split needs at least one shared class, got shared={self.shared}")
        if self.src_private < 0 or self.tgt_private < 0:
            raise ConfigError("private class counts must be non-negative")

    @classmethod
    def from_config(cls, config: dict) -> "SplitSpec":
        return cls(
            shared=config.get('shared', 4),
            src_private=config.get('src_private', 0),
            tgt_private=config.get('tgt_private', 3),
        )

    @property
    def scenario(self) -> str:
        if self.src_private == 0 and self.tgt_private > 0:
            return "osda"
        if self.src_private > 0 and self.tgt_private > 0:
            return "opda"
        if self.src_private > 0:
            return "pda"
        return "closed"

    @property
    def K(self) -> int:
        return self.shared + self.src_private

    @property
    def source_classes(self) -> List[int]:
        return list(range(self.K))

    @property
    def known_classes(self) -> List[int]:
        return list(range(self.shared))

    @property
    def unknown_classes(self) -> List[int]:
        return list(range(self.K, self.K + self.tgt_private))

    @property
    def target_classes(self) -> List[int]:
        return self.known_classes + self.unknown_classes


@dataclass(frozen=True)
class ShiftSpec:
    rotation: float = math.pi / 8
    translation: Tuple[float, ...] = (0.5, 0.5)
    scale: Tuple[float, ...] = (1.0,)
    noise_sigma: float = 0.35
    class_sep: float = 2.0
    dims: int = 8
    per_class_n: int = 100
    unknown_radius: float = 0.2

    def __post_init__(self):
        if self.dims < 2:
            raise ConfigError(f"dims must be at least 2, got {self.dims}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.class_sep <= 0:
            raise ConfigError(f"class_sep must be > 0, got {self.class_sep}")
        if self.per_class_n < 1:
            raise ConfigError(f"per_class_n must be positive, got {self.per_class_n}")
        if not 0.0 < self.unknown_radius <= 1.0:
            raise ConfigError(f"unknown_radius must be in (0, 1], got {self.unknown_radius}")
        if len(self.translation) > self.dims:
            raise ConfigError(f"translation has {len(self.translation)} entries for {self.dims} dims")
        if not self.scale or len(self.scale) > self.dims:
            raise ConfigError(f"scale has {len(self.scale)} entries for {self.dims} dims")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))

    @classmethod
    def from_config(cls, config: dict) -> "ShiftSpec":
        return cls(
            rotation=config.get('rotation', math.pi / 8),
            translation=tuple(config.get('translation', [0.5, 0.5])),
            scale=tuple(config.get('scale', [1.0])),
            noise_sigma=config.get('noise_sigma', 0.35),
            class_sep=config.get('class_sep', 2.0),
            dims=config.get('dims', 8),
            per_class_n=config.get('per_class_n', 100),
            unknown_radius=config.get('unknown_radius', 0.2),
        )

    @classmethod
    def identity(cls, **kwargs) -> "ShiftSpec":
        return cls(rotation=0.0, translation=(), scale=(1.0,), **kwargs)

    def translation_vector(self) -> np.ndarray:
        t = np.zeros(self.dims)
        t[: len(self.translation)] = self.translation
        return t

    def scale_vector(self) -> np.ndarray:
        if len(self.scale) == 1:
            return np.full(self.dims, self.scale[0])
        s = np.ones(self.dims)
        s[: len(self.scale)] = self.scale
        return s


@dataclass(eq=False)
class DatasetBundle:
    """
    Samples of one domain. ``y`` holds global class IDs and is only read for evaluation
    on the target side; arrays are made read-only on construction.
    """
    x: np.ndarray
    y: np.ndarray
    label_set: Tuple[int, ...]
    domain: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.array(self.x, dtype=np.float64)
        self.y = np.array(self.y, dtype=np.int64)
        self.label_set = tuple(sorted(int(c) for c in self.label_set))
        if self.domain not in DOMAINS:
            raise DatasetFormatError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise DatasetFormatError(f"x of shape {self.x.shape} does not match y of shape {self.y.shape}")
        stray = set(np.unique(self.y).tolist()) - set(self.label_set)
        if stray:
            raise DatasetFormatError(f"labels {sorted(stray)} are outside the declared label_set {list(self.label_set)}")
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dims(self) -> int:
        return self.x.shape[1]

    def unlabeled(self) -> np.ndarray:
        return self.x

    def class_counts(self) -> dict:
        return {c: int(np.sum(self.y == c)) for c in self.label_set}

    def equals(self, other: "DatasetBundle") -> bool:
        """Bitwise equality on x, y, label_set and domain."""
        return (
            self.domain == other.domain
            and self.label_set == other.label_set
            and self.x.shape == other.x.shape
            and self.x.tobytes() == other.x.tobytes()
            and np.array_equal(self.y, other.y)
        )


def rotate(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotates the first two coordinates of every row by ``angle`` radians."""
    points = np.array(points, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    x0, x1 = points[..., 0].copy(), points[..., 1].copy()
    points[..., 0] = c * x0 - s * x1
    points[..., 1] = s * x0 + c * x1
    return points


def apply_shift(points: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    return rotate(points, shift.rotation) * shift.scale_vector() + shift.translation_vector()


def _ring_point(angle: float, radius: float, dims: int) -> np.ndarray:
    p = np.zeros(dims)
    p[0] = radius * math.cos(angle)
    p[1] = radius * math.sin(angle)
    return p


def source_prototypes(split: SplitSpec, shift: ShiftSpec) -> np.ndarray:
    n = split.K
    return np.stack([_ring_point(2 * math.pi * i / n, shift.class_sep, shift.dims) for i in range(n)])


def unknown_angles(split: SplitSpec, shift: ShiftSpec) -> List[float]:
    """
    Source-frame angles of the target-private classes, in class ID order.

    Candidates lie on the inner ring (radius ``class_sep * unknown_radius``) at the midpoints
    between neighbouring source classes, then at the quarter points. Every candidate is moved
    by the shift, and each pick maximizes the smallest distance to the shifted known
    prototypes and the unknowns picked so far (ties go to the smallest angle).
    """
    n = split.K
    step = 2 * math.pi / n
    candidates = [step * (i + 0.5) for i in range(n)]
    if split.tgt_private > len(candidates):
        candidates += [step * (i + q) for q in (0.25, 0.75) for i in range(n)]
    if split.tgt_private > len(candidates):
        raise ConfigError(f"cannot place {split.tgt_private} unknown classes around {n} source classes")

    remaining = sorted(candidates)
    placed = dict(zip(remaining, _inner_ring(remaining, shift)))
    taken = list(apply_shift(source_prototypes(split, shift)[: split.shared], shift))
    chosen: List[float] = []
    for _ in range(split.tgt_private):
        best, best_dist = None, -1.0
        for angle in remaining:
            dist = min(float(np.linalg.norm(placed[angle] - t)) for t in taken)
            if dist > best_dist + 1e-12:
                best, best_dist = angle, dist
        chosen.append(best)
        taken.append(placed[best])
        remaining.remove(best)
    return chosen


def _inner_ring(angles: Sequence[float], shift: ShiftSpec) -> np.ndarray:
    radius = shift.class_sep * shift.unknown_radius
    return apply_shift(np.stack([_ring_point(a, radius, shift.dims) for a in angles]), shift)


def target_prototypes(split: SplitSpec, shift: ShiftSpec) -> np.ndarray:
    """Prototypes for split.target_classes, in that order."""
    known = apply_shift(source_prototypes(split, shift)[: split.shared], shift)
    if split.tgt_private == 0:
        return known
    return np.vstack([known, _inner_ring(unknown_angles(split, shift), shift)])


def _sample(prototypes: np.ndarray, classes: Sequence[int], shift: ShiftSpec,
            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for proto, c in zip(prototypes, classes):
        xs.append(proto + rng.normal(0.0, shift.noise_sigma, size=(shift.per_class_n, shift.dims)))
        ys.append(np.full(shift.per_class_n, c, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


def generate(split: SplitSpec, shift: ShiftSpec, seed: int = 0) -> Tuple[DatasetBundle, DatasetBundle]:
    rng = substream(seed, "data")
    meta = {"seed": int(seed), "scenario": split.scenario}

    xs, ys = _sample(source_prototypes(split, shift), split.source_classes, shift, rng)
    source = DatasetBundle(xs, ys, split.source_classes, "source", dict(meta))

    xt, yt = _sample(target_prototypes(split, shift), split.target_classes, shift, rng)
    target = DatasetBundle(xt, yt, split.target_classes, "target", dict(meta))

    logger.info(
        f"Generated {split.scenario} datasets (seed={seed}): source n={source.n} classes={list(source.label_set)}, "
        f"target n={target.n} classes={list(target.label_set)}"
    )
    return source, target


def generate_from_config(config: dict, seed: int = 0) -> Tuple[DatasetBundle, DatasetBundle]:
    return generate(SplitSpec.from_config(config.get('split', {})),
                    ShiftSpec.from_config(config.get('shift', {})), seed)
