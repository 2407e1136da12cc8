import copy
import hashlib
import json
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import tensor as T
from src.config import substream
from src.errors import CheckpointFormatError, ShapeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lab-two-head-checkpoint"
CHECKPOINT_VERSION = 1

MODES = ("train", "eval")


class BatchNorm1d:
    """Per-feature batch normalization for the bottleneck, with running statistics for eval mode."""

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.width = width
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            batch = x.shape[0]
            if batch < 2:
                raise ShapeError(f"batch norm in train mode needs at least 2 rows, got shape {x.shape}")
            mu = T.mean(x, axis=0)
            centered = T.sub(x, mu)
            var = T.mean(T.mul(centered, centered), axis=0)
            x_hat = T.mul(centered, T.power(T.add(var, Tensor(self.eps)), -0.5))

            # running variance tracks the unbiased estimate
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu.data
            unbiased = var.data * batch / (batch - 1)
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = T.mul(T.sub(x, Tensor(self.running_mean)), Tensor(inv_std))
        return T.add(T.mul(x_hat, self.gamma), self.beta)


class TwoHeadModel:
    """
    Feature module g (affine+ReLU hidden layers, then an affine bottleneck of width d
    normalized by BatchNorm1d) feeding two bias-free linear heads W1, W2 of shape d x K.
    """

    def __init__(self, in_dim: int, num_classes: int, hidden_dims: Sequence[int] = (32, 32),
                 bottleneck_dim: int = 16, use_bn: bool = True, bn_momentum: float = 0.1,
                 bn_eps: float = 1e-5, seed: int = 0):
        self.in_dim = int(in_dim)
        self.K = int(num_classes)
        self.d = int(bottleneck_dim)
        self.hidden_dims = [int(h) for h in hidden_dims]
        self.use_bn = bool(use_bn)
        self.training = True

        feat_rng = substream(seed, "init-features")
        widths = [self.in_dim] + self.hidden_dims + [self.d]
        self.layers: List[Tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            W = feat_rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.layers.append((Tensor(W, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))

        self.bn = BatchNorm1d(self.d, momentum=bn_momentum, eps=bn_eps) if self.use_bn else None

        # same distribution, independent streams, so the heads start out distinct
        head_std = np.sqrt(2.0 / (self.d + self.K))
        self.W1 = Tensor(substream(seed, "init-head1").normal(0.0, head_std, size=(self.d, self.K)), requires_grad=True)
        self.W2 = Tensor(substream(seed, "init-head2").normal(0.0, head_std, size=(self.d, self.K)), requires_grad=True)

    @classmethod
    def from_config(cls, config: dict, in_dim: int, num_classes: int, seed: int = 0) -> "TwoHeadModel":
        return cls(
            in_dim=in_dim,
            num_classes=num_classes,
            hidden_dims=config.get('hidden_dims', [32, 32]),
            bottleneck_dim=config.get('bottleneck_dim', 16),
            use_bn=config.get('use_bn', True),
            bn_momentum=config.get('bn_momentum', 0.1),
            bn_eps=config.get('bn_eps', 1e-5),
            seed=seed,
        )

    # --- parameter groups ---

    def backbone_parameters(self) -> List[Tensor]:
        params = []
        for W, b in self.layers[:-1]:
            params += [W, b]
        return params

    def bottleneck_parameters(self) -> List[Tensor]:
        W, b = self.layers[-1]
        params = [W, b]
        if self.bn is not None:
            params += self.bn.parameters()
        return params

    def feature_parameters(self) -> List[Tensor]:
        return self.backbone_parameters() + self.bottleneck_parameters()

    def head_parameters(self) -> List[Tensor]:
        return [self.W1, self.W2]

    def parameters(self) -> List[Tensor]:
        return self.feature_parameters() + self.head_parameters()

    # --- forward ---

    def features(self, x: Tensor, mode: str = "train") -> Tensor:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape (B, {self.in_dim}), got {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("empty input batch")
        training = mode == "train"
        if training and x.shape[0] < 2:
            raise ShapeError(f"train mode needs a batch of at least 2 rows, got shape {x.shape}")

        h = x
        for i, (W, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, W), b)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        if self.bn is not None:
            h = self.bn(h, training=training)
        return h

    def forward_probs(self, x: Tensor, mode: str = "train") -> Tuple[Tensor, Tensor]:
        z = self.features(x, mode)
        return T.softmax(T.matmul(z, self.W1)), T.softmax(T.matmul(z, self.W2))

    def predict_probs(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode probabilities as plain arrays; never records on a tape."""
        p1, p2 = self.forward_probs(Tensor(x), mode="eval")
        return p1.data, p2.data

    def snapshot(self) -> "TwoHeadModel":
        """Frozen eval-mode copy, safe to share while the original keeps training."""
        frozen = copy.deepcopy(self)
        frozen.training = False
        for p in frozen.parameters():
            p.requires_grad = False
            p.grad = None
        return frozen

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p.data).tobytes())
        if self.bn is not None:
            digest.update(self.bn.running_mean.tobytes())
            digest.update(self.bn.running_var.tobytes())
        return digest.hexdigest()


# --- checkpoint container ---

def _to_payload(model: TwoHeadModel, loss_config: Optional[Dict], meta: Optional[Dict]) -> Dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "K": model.K,
        "d": model.d,
        "in_dim": model.in_dim,
        "hidden_dims": model.hidden_dims,
        "use_bn": model.use_bn,
        "layers": [{"W": W.data.tolist(), "b": b.data.tolist()} for W, b in model.layers],
        "W1": model.W1.data.tolist(),
        "W2": model.W2.data.tolist(),
        "bn": None,
        "loss_config": loss_config or {},
        "meta": meta or {},
    }
    if model.bn is not None:
        payload["bn"] = {
            "eps": model.bn.eps,
            "momentum": model.bn.momentum,
            "gamma": model.bn.gamma.data.tolist(),
            "beta": model.bn.beta.data.tolist(),
            "running_mean": model.bn.running_mean.tolist(),
            "running_var": model.bn.running_var.tolist(),
        }
    return payload


def save_checkpoint(model: TwoHeadModel, path: str, loss_config: Optional[Dict] = None,
                    meta: Optional[Dict] = None):
    """
    Writes the model as sorted-key JSON. Floats go through repr, so a reload is exact
    and identical parameters always give identical bytes.
    """
    text = json.dumps(_to_payload(model, loss_config, meta), sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    logger.info(f"Checkpoint saved to {path} (K={model.K}, d={model.d})")


def load_checkpoint(path: str) -> Tuple[TwoHeadModel, Dict, Dict]:
    """Returns (model, loss_config, meta)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{path} is not a valid checkpoint: {e}")

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: unknown format {payload.get('format')!r}")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {payload.get('format_version')!r}")

    try:
        model = TwoHeadModel(
            in_dim=payload["in_dim"],
            num_classes=payload["K"],
            hidden_dims=payload["hidden_dims"],
            bottleneck_dim=payload["d"],
            use_bn=payload["use_bn"],
        )
        if len(payload["layers"]) != len(model.layers):
            raise CheckpointFormatError(f"{path}: layer count does not match hidden_dims")
        for (W, b), stored in zip(model.layers, payload["layers"]):
            _assign(W, stored["W"], path)
            _assign(b, stored["b"], path)
        _assign(model.W1, payload["W1"], path)
        _assign(model.W2, payload["W2"], path)
        if model.bn is not None:
            bn = payload["bn"]
            model.bn.eps = float(bn["eps"])
            model.bn.momentum = float(bn["momentum"])
            _assign(model.bn.gamma, bn["gamma"], path)
            _assign(model.bn.beta, bn["beta"], path)
            model.bn.running_mean = np.array(bn["running_mean"], dtype=np.float64)
            model.bn.running_var = np.array(bn["running_var"], dtype=np.float64)
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: missing or malformed field ({e})")

    return model, payload.get("loss_config", {}), payload.get("meta", {})


def _assign(target: Tensor, values, path: str):
    arr = np.array(values, dtype=np.float64)
    if arr.shape != target.shape:
        raise CheckpointFormatError(f"{path}: expected shape {target.shape}, found {arr.shape}")
    target.data = arr
    target.grad = np.zeros_like(arr)
