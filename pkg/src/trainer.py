import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.config import substream
from src.data_loader import class_balanced_batches, target_batches
from src.errors import ConfigError, DegenerateBandWarning, NonFiniteLossError, ShapeError
from src.generator import DatasetBundle
from src.losses import LossConfig, source_loss, target_objective
from src.scorer import ScoringEngine, ThresholdBand
from src.tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)

# polynomial decay used by common source-free adaptation recipes
LR_GAMMA = 10.0
LR_POWER = 0.75


@dataclass
class OptimConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    max_iters: int = 600
    batch_size: int = 64
    new_layer_lr_mult: float = 1.0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.max_iters < 1 or self.batch_size < 1:
            raise ConfigError("max_iters and batch_size must be positive")

    @classmethod
    def from_config(cls, config: dict, seed: int = 0) -> "OptimConfig":
        return cls(
            lr0=config.get('lr0', 0.01),
            momentum=config.get('momentum', 0.9),
            weight_decay=config.get('weight_decay', 1e-3),
            max_iters=config.get('max_iters', 600),
            batch_size=config.get('batch_size', 64),
            new_layer_lr_mult=config.get('new_layer_lr_mult', 1.0),
            log_every=config.get('log_every', 100),
            seed=seed,
        )


def lr_schedule(lr0: float, p: float) -> float:
    """lr0 * (1 + 10 p) ** -0.75 for training progress p in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return lr0 * (1.0 + LR_GAMMA * p) ** (-LR_POWER)


@dataclass
class SGDState:
    velocity: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "SGDState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SGDState, cfg: OptimConfig,
             lr: float, lr_mults: Optional[Sequence[float]] = None):
    """
    Momentum SGD with weight decay folded into the gradient:
    v <- momentum * v + grad + weight_decay * param; param <- param - lr * mult * v.
    """
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ShapeError(f"got {len(params)} params, {len(grads)} grads, {len(state.velocity)} velocity buffers")
    lr_mults = lr_mults if lr_mults is not None else [1.0] * len(params)

    for p, g, v in zip(params, grads, state.velocity):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"param {p.shape}, grad {g.shape}, velocity {v.shape} do not match")
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError("gradient", state.step, float("nan"))

    for i, (p, g, mult) in enumerate(zip(params, grads, lr_mults)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        state.velocity[i] = cfg.momentum * state.velocity[i] + g + cfg.weight_decay * p.data
        p.data = p.data - lr * mult * state.velocity[i]
    state.step += 1


@dataclass
class TrainLog:
    phase: str
    header: Dict[str, Any] = field(default_factory=dict)
    records: List[Dict[str, Any]] = field(default_factory=list)
    checksum: str = ""
    degenerate_band: bool = False

    def append(self, iteration: int, loss: float, lr: float, n_plus: int = 0, n_minus: int = 0):
        self.records.append({"iteration": iteration, "loss": loss, "lr": lr, "n_plus": n_plus, "n_minus": n_minus})

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    @property
    def lrs(self) -> List[float]:
        return [r["lr"] for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=["iteration", "loss", "lr", "n_plus", "n_minus"])

    def save(self, path: str):
        lines = [f"# phase={self.phase}"]
        lines += [f"# {k}={v}" for k, v in self.header.items()]
        lines.append(f"# degenerate_band={str(self.degenerate_band).lower()}")
        lines.append(f"# checksum={self.checksum}")
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("\n".join(lines) + "\n")
            self.to_frame().to_csv(f, index=False, float_format="%.17g", lineterminator="\n")


def _lr_mults(model, params: Sequence[Tensor], mult: float) -> List[float]:
    new_layers = {id(p) for p in model.bottleneck_parameters() + model.head_parameters()}
    return [mult if id(p) in new_layers else 1.0 for p in params]


def _check_loss(value: float, phase: str, iteration: int):
    if not math.isfinite(value):
        logger.error(f"{phase} loss became {value} at iteration {iteration}, aborting")
        raise NonFiniteLossError(phase, iteration, value)


def train_source(model, source: DatasetBundle, loss_cfg: LossConfig, optim_cfg: OptimConfig) -> TrainLog:
    """Minimizes the source loss over class-balanced batches, updating every parameter."""
    if list(source.label_set) != list(range(model.K)) or loss_cfg.K != model.K:
        raise ConfigError(f"source label_set {list(source.label_set)} does not match a {model.K}-way model")

    batches = class_balanced_batches(source, optim_cfg.batch_size, rng=substream(optim_cfg.seed, "batching"))
    params = model.parameters()
    mults = _lr_mults(model, params, optim_cfg.new_layer_lr_mult)
    state = SGDState.for_params(params)
    log = TrainLog("source", header={"K": model.K, "lambda": loss_cfg.lam, "alpha": loss_cfg.alpha})
    model.training = True

    logger.info(f"Training source model: {optim_cfg.max_iters} iterations, batch {optim_cfg.batch_size}")
    for it in range(optim_cfg.max_iters):
        lr = lr_schedule(optim_cfg.lr0, it / optim_cfg.max_iters)
        xb, yb = next(batches)
        with Tape() as tape:
            loss = source_loss(model, Tensor(xb), yb, loss_cfg)
        value = loss.item()
        _check_loss(value, "source", it)

        for p in params:
            p.zero_grad()
        backward(loss, tape)
        sgd_step(params, [p.grad for p in params], state, optim_cfg, lr, mults)
        log.append(it, value, lr, n_plus=len(yb))

        if (it + 1) % optim_cfg.log_every == 0 or it + 1 == optim_cfg.max_iters:
            logger.info(f"SOURCE_PROGRESS: {it + 1}/{optim_cfg.max_iters} loss={value:.5f} lr={lr:.6f}")

    log.checksum = model.checksum()
    return log


def _prior_targets(loss_cfg: LossConfig, ema: Optional[List[np.ndarray]]):
    if loss_cfg.prior == "uniform":
        u = np.full(loss_cfg.K, 1.0 / loss_cfg.K)
        return u, u
    if loss_cfg.prior == "ema":
        return ema[0].copy(), ema[1].copy()
    return None


def adapt_target(model, target_x: np.ndarray, band: ThresholdBand, loss_cfg: LossConfig,
                 optim_cfg: OptimConfig, scorer: Optional[ScoringEngine] = None) -> TrainLog:
    """
    Fine-tunes the feature module on unlabeled target data with the heads held fixed.

    Each iteration runs one train-mode forward pass over a target batch, scores it, splits
    it by the band and steps on the partitioned objective. Batches with nothing on either
    side of the band take no step (BN running statistics still move).
    """
    scorer = scorer if scorer is not None else ScoringEngine({})
    x = np.asarray(target_x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ShapeError(f"adaptation needs at least 2 target samples, got {n}")
    if loss_cfg.K != model.K:
        raise ConfigError(f"loss configured for K={loss_cfg.K}, model has K={model.K}")

    batches = target_batches(n, optim_cfg.batch_size, substream(optim_cfg.seed, "batching"))
    steps_per_epoch = math.ceil(n / min(optim_cfg.batch_size, n))
    params = model.feature_parameters()
    all_params = model.parameters()
    mults = _lr_mults(model, params, optim_cfg.new_layer_lr_mult)
    state = SGDState.for_params(params)
    ema = [np.full(model.K, 1.0 / model.K) for _ in range(2)] if loss_cfg.prior == "ema" else None

    log = TrainLog("adapt", header={
        "w0": band.w0,
        "rho": band.rho,
        "rejection": "on" if scorer.rejection else "off",
        "score": scorer.kind,
        "prior": loss_cfg.prior,
        "T": loss_cfg.T,
    })
    if not scorer.rejection:
        logger.info("Rejection disabled: adaptation objective is -L_lmi on every sample")
    model.training = True

    stepped_in_epoch = 0
    total_steps = 0
    for it in range(optim_cfg.max_iters):
        if (scorer.reestimate_every and scorer.rejection and scorer.fixed_w0 is None
                and it > 0 and it % (scorer.reestimate_every * steps_per_epoch) == 0):
            band = scorer.fit_band(model.snapshot(), x, seed=optim_cfg.seed)
            log.header[f"w0@{it}"] = band.w0

        lr = lr_schedule(optim_cfg.lr0, it / optim_cfg.max_iters)
        xb = x[next(batches)]

        with Tape() as tape:
            p1, p2 = model.forward_probs(Tensor(xb), mode="train")
            scores = scorer.score_probs(p1.data, p2.data)
            plus, minus, _ = scorer.partition(scores, band)
            has_gradient = bool(plus) or (bool(minus) and loss_cfg.use_unk)
            if has_gradient:
                loss = target_objective(p1, p2, plus, minus, loss_cfg, _prior_targets(loss_cfg, ema))

        if has_gradient:
            value = loss.item()
            _check_loss(value, "adapt", it)
            for p in all_params:
                p.zero_grad()
            backward(loss, tape)
            # heads are frozen: only the feature module is stepped
            sgd_step(params, [p.grad for p in params], state, optim_cfg, lr, mults)
            stepped_in_epoch += 1
            total_steps += 1
            if ema is not None and plus:
                m = loss_cfg.ema_momentum
                for v, p in enumerate((p1, p2)):
                    ema[v] = m * ema[v] + (1 - m) * p.data[plus].mean(axis=0)
        else:
            value = 0.0
        log.append(it, value, lr, n_plus=len(plus), n_minus=len(minus))

        if (it + 1) % steps_per_epoch == 0:
            if stepped_in_epoch == 0:
                _warn_degenerate(log, it)
            stepped_in_epoch = 0

        if (it + 1) % optim_cfg.log_every == 0 or it + 1 == optim_cfg.max_iters:
            logger.info(f"ADAPT_PROGRESS: {it + 1}/{optim_cfg.max_iters} loss={value:.5f} "
                        f"plus={len(plus)} minus={len(minus)} lr={lr:.6f}")

    if total_steps == 0 and not log.degenerate_band:
        _warn_degenerate(log, optim_cfg.max_iters - 1)

    model.training = False
    log.checksum = model.checksum()
    return log


def _warn_degenerate(log: TrainLog, iteration: int):
    log.degenerate_band = True
    message = f"No target batch left the ignored score band in the epoch ending at iteration {iteration}"
    logger.warning(message)
    warnings.warn(message, DegenerateBandWarning)
