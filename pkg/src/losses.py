"""
Training objectives of the two-head model.

Source side: label-smoothed cross-entropy averaged over both heads plus an
orthogonality penalty between the heads. Target side: a localized mutual
information term on confidently-known samples and a uniform-target entropic
loss on likely-unknown samples.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from src import tensor as T
from src.errors import ConfigError, EmptyBatchError, ShapeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)

PRIORS = ("flatten", "uniform", "ema")


@dataclass
class LossConfig:
    K: int
    lam: float = 0.01
    alpha: float = 0.1
    T: float = 0.1
    prior: str = "flatten"
    ema_momentum: float = 0.9
    use_unk: bool = True
    use_diversity: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be positive, got {self.K}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.alpha < 1:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0 <= self.T <= 1:
            raise ConfigError(f"T must lie in [0, 1], got {self.T}")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")

    @classmethod
    def from_config(cls, config: dict, K: int) -> "LossConfig":
        return cls(
            K=K,
            lam=config.get('lambda', config.get('lam', 0.01)),
            alpha=config.get('alpha', 0.1),
            T=config.get('T', 0.1),
            prior=config.get('prior', 'flatten'),
            ema_momentum=config.get('ema_momentum', 0.9),
            use_unk=config.get('use_unk', True),
            use_diversity=config.get('use_diversity', True),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d['lambda'] = d.pop('lam')
        return d


def smoothed_labels(y: int, K: int, alpha: float) -> Tensor:
    if not 0 <= y < K:
        raise ValueError(f"label {y} out of range for K={K}")
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    q = np.full(K, alpha / K)
    q[y] = (1 - alpha) + alpha / K
    return Tensor(q)


def smoothed_targets(ys: Sequence[int], K: int, alpha: float) -> np.ndarray:
    ys = np.asarray(ys, dtype=int)
    if ys.size and (ys.min() < 0 or ys.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{ys.min()}, {ys.max()}]")
    q = np.full((ys.size, K), alpha / K)
    q[np.arange(ys.size), ys] = (1 - alpha) + alpha / K
    return q


def orth_penalty(W1: Tensor, W2: Tensor) -> Tensor:
    """Frobenius norm of W1^T W2."""
    if W1.shape != W2.shape:
        raise ShapeError(f"head shapes differ: {W1.shape} vs {W2.shape}")
    return T.frobenius_norm(T.matmul(T.transpose(W1), W2))


def _cross_entropy(q: np.ndarray, p: Tensor) -> Tensor:
    # mean over rows of -sum_k q_k log p_k
    return T.scale(T.mean(T.sum(T.mul(Tensor(q), T.log(p)), axis=1)), -1.0)


def source_loss(model, x, y, cfg: LossConfig) -> Tensor:
    """Label-smoothed cross-entropy averaged over samples and both heads, plus lambda * orth_penalty."""
    y = np.asarray(y, dtype=int)
    if y.size == 0:
        raise EmptyBatchError("source batch is empty")
    p1, p2 = model.forward_probs(x, mode="train")
    q = smoothed_targets(y, cfg.K, cfg.alpha)
    loss = T.scale(T.add(_cross_entropy(q, p1), _cross_entropy(q, p2)), 0.5)
    if cfg.lam > 0:
        loss = T.add(loss, T.scale(orth_penalty(model.W1, model.W2), cfg.lam))
    return loss


def flatten(p: Tensor, T_: float) -> Tensor:
    """
    p_i^T / sum_j p_j^T along the last axis.
    T=1 hands p back unchanged; T=0 gives the uniform distribution over the support of p.
    """
    p = p if isinstance(p, Tensor) else Tensor(p)
    if not 0 <= T_ <= 1:
        raise ValueError(f"T must lie in [0, 1], got {T_}")
    if np.any(p.data.sum(axis=-1) == 0):
        raise ValueError("cannot flatten an all-zero vector")
    if np.any(p.data < 0) or np.any(np.abs(p.data.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("flatten expects non-negative entries summing to 1")
    if T_ == 1.0:
        return p
    powered = T.power(p, T_)
    norm = T.sum(powered, axis=-1, keepdims=True)
    return T.mul(powered, T.power(norm, -1.0))


def _negentropy(p: Tensor) -> Tensor:
    return T.mean(T.sum(T.mul(p, T.log(p)), axis=1))


def _kl(Q: Tensor, target: np.ndarray) -> Tensor:
    return T.sum(T.mul(Q, T.sub(T.log(Q), T.log(Tensor(target)))))


def lmi_loss(p1: Tensor, p2: Tensor, T_: float, targets: Optional[Tuple[np.ndarray, np.ndarray]] = None,
             use_diversity: bool = True) -> Tensor:
    """
    Localized mutual information (to be maximized): per head, the batch-mean negentropy minus
    KL(Q || Q_hat) with Q the batch-mean prediction. Q_hat defaults to Flatten(Q, T) and is
    treated as a constant; ``targets`` replaces it (uniform or moving-average priors).
    """
    if p1.shape[0] == 0 or p2.shape[0] == 0:
        raise EmptyBatchError("lmi_loss needs at least one row")
    per_head = []
    for v, p in enumerate((p1, p2)):
        term = _negentropy(p)
        if use_diversity:
            Q = T.mean(p, axis=0)
            if targets is not None:
                q_hat = np.asarray(targets[v], dtype=np.float64)
            else:
                q_hat = flatten(Tensor(Q.data), T_).data
            term = T.sub(term, _kl(Q, q_hat))
        per_head.append(term)
    return T.scale(T.add(per_head[0], per_head[1]), 0.5)


def unk_loss(p1: Tensor, p2: Tensor) -> Tensor:
    """Cross-entropy against the uniform vector, averaged over rows and heads; minimum log K."""
    if p1.shape[0] == 0 or p2.shape[0] == 0:
        raise EmptyBatchError("unk_loss needs at least one row")
    K = p1.shape[1]
    per_head = [T.scale(T.mean(T.sum(T.log(p), axis=1)), -1.0 / K) for p in (p1, p2)]
    return T.scale(T.add(per_head[0], per_head[1]), 0.5)


def target_objective(p1: Tensor, p2: Tensor, plus_idx: Sequence[int], minus_idx: Sequence[int],
                     cfg: LossConfig, targets: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """L_unk on the minus rows minus L_lmi on the plus rows; an empty side contributes nothing."""
    plus_idx, minus_idx = list(plus_idx), list(minus_idx)
    if not plus_idx and not minus_idx:
        raise EmptyBatchError("both score-band sides are empty")

    loss = Tensor(0.0)
    if minus_idx and cfg.use_unk:
        loss = T.add(loss, unk_loss(T.select_rows(p1, minus_idx), T.select_rows(p2, minus_idx)))
    if plus_idx:
        lmi = lmi_loss(T.select_rows(p1, plus_idx), T.select_rows(p2, plus_idx), cfg.T,
                       targets=targets, use_diversity=cfg.use_diversity)
        loss = T.sub(loss, lmi)
    return loss


def target_loss(model, x, plus_idx: Sequence[int], minus_idx: Sequence[int], cfg: LossConfig,
                targets: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """
    One train-mode forward over the whole batch, then the partitioned objective.
    Gradients reach every parameter on the tape; keeping the heads fixed is the trainer's job.
    """
    p1, p2 = model.forward_probs(x, mode="train")
    return target_objective(p1, p2, plus_idx, minus_idx, cfg, targets)
