import hashlib
import json
import logging
import os
import re
from typing import Iterator, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import substream
from src.errors import DatasetFormatError
from src.generator import DatasetBundle, ShiftSpec, SplitSpec, generate

logger = logging.getLogger(__name__)

DATASET_MAGIC = "lab-dataset v1"
_HEADER_RE = re.compile(
    r"^# lab-dataset v1 dims=(?P<dims>\d+) n=(?P<n>\d+) domain=(?P<domain>source|target) "
    r"label_set=(?P<label_set>\d+(?:,\d+)*)?$"
)


def save_dataset(bundle: DatasetBundle, path: str):
    """
    One header line, a CSV column header, then one row per sample. Features are written
    with 17 significant digits so that a reload is bit-identical.
    """
    labels = ",".join(str(c) for c in bundle.label_set)
    header = f"# {DATASET_MAGIC} dims={bundle.dims} n={bundle.n} domain={bundle.domain} label_set={labels}\n"
    df = pd.DataFrame(bundle.x, columns=[f"x{i}" for i in range(bundle.dims)])
    df["label"] = bundle.y
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header)
        df.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")


def load_dataset(path: str) -> DatasetBundle:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    match = _HEADER_RE.match(first)
    if match is None:
        raise DatasetFormatError(f"{path}: malformed header line {first!r}")

    dims = int(match.group("dims"))
    n = int(match.group("n"))
    domain = match.group("domain")
    label_set = [int(c) for c in (match.group("label_set") or "").split(",") if c]

    try:
        df = pd.read_csv(path, skiprows=1, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetFormatError(f"{path}: could not parse rows ({e})")

    expected = [f"x{i}" for i in range(dims)] + ["label"]
    if list(df.columns) != expected:
        raise DatasetFormatError(f"{path}: expected columns {expected}, found {list(df.columns)}")
    if len(df) != n:
        raise DatasetFormatError(f"{path}: header declares {n} rows, found {len(df)} (truncated file?)")
    if df.isna().any().any():
        raise DatasetFormatError(f"{path}: missing values (truncated file?)")

    labels = df["label"].to_numpy()
    if not np.all(labels == np.round(labels)):
        raise DatasetFormatError(f"{path}: non-integer labels")
    # DatasetBundle rejects labels outside label_set
    return DatasetBundle(df[expected[:-1]].to_numpy(dtype=np.float64), labels.astype(np.int64), label_set, domain)


def class_balanced_batches(bundle: DatasetBundle, batch_size: int, seed: int = 0,
                           rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Endless stream of (x, y) batches whose per-class counts differ by at most one.
    Every class walks through its own shuffled sample order and reshuffles when exhausted;
    the leftover slots of a batch rotate across classes.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    rng = rng if rng is not None else substream(seed, "batching")
    classes = list(bundle.label_set)
    members = {c: np.flatnonzero(bundle.y == c) for c in classes}
    for c, idx in members.items():
        if idx.size == 0:
            raise DatasetFormatError(f"class {c} has no samples in the {bundle.domain} dataset")

    n_classes = len(classes)
    base, extra = divmod(batch_size, n_classes)
    orders = {c: rng.permutation(members[c]) for c in classes}
    cursors = {c: 0 for c in classes}
    offset = 0

    def take(c: int, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if cursors[c] == orders[c].size:
                orders[c] = rng.permutation(members[c])
                cursors[c] = 0
            chunk = orders[c][cursors[c]: cursors[c] + k]
            cursors[c] += chunk.size
            k -= chunk.size
            out.append(chunk)
        return np.concatenate(out) if out else np.empty(0, dtype=int)

    while True:
        bonus = {classes[(offset + i) % n_classes] for i in range(extra)}
        offset = (offset + extra) % n_classes
        idx = np.concatenate([take(c, base + (1 if c in bonus else 0)) for c in classes])
        yield bundle.x[idx], bundle.y[idx]


def target_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches of size min(batch_size, n) cut from back-to-back permutations."""
    if n < 1:
        raise DatasetFormatError("target dataset is empty")
    size = min(batch_size, n)
    buffer = np.empty(0, dtype=int)
    while True:
        while buffer.size < size:
            buffer = np.concatenate([buffer, rng.permutation(n)])
        yield buffer[:size]
        buffer = buffer[size:]


class DataEngine:
    """Generates dataset pairs and optionally keeps them in an on-disk cache keyed by (split, shift, seed)."""

    def __init__(self, config: dict):
        self.cache_dir = config.get('cache_dir')
        if self.cache_dir and not os.path.exists(self.cache_dir):
            os.makedirs(self.cache_dir)

    def _cache_key(self, split: SplitSpec, shift: ShiftSpec, seed: int) -> str:
        payload = json.dumps({"split": split.__dict__, "shift": shift.__dict__, "seed": int(seed)}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def get_datasets(self, split: SplitSpec, shift: ShiftSpec, seed: int,
                     force_refresh: bool = False) -> Tuple[DatasetBundle, DatasetBundle]:
        if not self.cache_dir:
            return generate(split, shift, seed)

        key = self._cache_key(split, shift, seed)
        source_path = os.path.join(self.cache_dir, f"{key}_source.csv")
        target_path = os.path.join(self.cache_dir, f"{key}_target.csv")

        if not force_refresh and os.path.exists(source_path) and os.path.exists(target_path):
            try:
                return load_dataset(source_path), load_dataset(target_path)
            except DatasetFormatError as e:
                logger.warning(f"Could not read cached datasets {key}: {e}")

        source, target = generate(split, shift, seed)
        save_dataset(source, source_path)
        save_dataset(target, target_path)
        return source, target
