"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a Tape is active (``with Tape() as tape:``) are recorded
together with their backward rule; ``backward(loss, tape)`` walks the records in
reverse and fills ``grad`` on every leaf that requires it. Without an active tape
the same functions simply compute values, which is how inference snapshots run.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ShapeError, TapeError

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

_state = threading.local()


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._op = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, every one of them lands on a recorded primitive
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, power(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    Ordered log of the primitives executed while it is active.
    One tape belongs to one thread; the active tape is thread-local.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._outputs = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.stack.pop()
        return False

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn):
        self.records.append(_Record(op, inputs, output, backward_fn))
        self._outputs.add(id(output))

    def leaves(self) -> List[Tensor]:
        seen = set()
        leaves = []
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in self._outputs and id(t) not in seen:
                    seen.add(id(t))
                    leaves.append(t)
        return leaves

    def __len__(self):
        return len(self.records)


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # sum away the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _emit(op: str, inputs: Tuple[Tensor, ...], value: np.ndarray, backward_fn) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value)
    if needs_grad:
        out.requires_grad = True
        out._op = op
        tape.record(op, inputs, out, backward_fn)
    return out


# --- primitives ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), a.data @ b.data, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), value, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), value, backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = _as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (logits,), s, backward)


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped to >= 1e-12; the clamped region has zero slope."""
    a = _as_tensor(a)
    inside = a.data >= LOG_CLAMP
    clamped = np.maximum(a.data, LOG_CLAMP)

    def backward(g):
        return (np.where(inside, g / clamped, 0.0),)

    return _emit("log", (a,), np.log(clamped), backward)


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), value, backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    value = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _emit("mean", (a,), value, backward)


def inner(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"inner shape mismatch: {a.shape} . {b.shape}")
    value = (a.data * b.data).sum(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        return g * b.data, g * a.data

    return _emit("inner", (a, b), value, backward)


def frobenius_norm(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    norm = float(np.sqrt((a.data ** 2).sum()))

    def backward(g):
        if norm == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / norm,)

    return _emit("frobenius_norm", (a,), np.array(norm), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent for a >= 0, with 0**e := 0 for every e (0**0 included)."""
    a = _as_tensor(a)
    e = float(exponent)
    positive = a.data > 0
    safe = np.where(positive, a.data, 1.0)
    value = np.where(positive, safe ** e, 0.0)

    def backward(g):
        return (np.where(positive, g * e * safe ** (e - 1.0), 0.0),)

    return _emit("power", (a,), value, backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


# --- compositions ---

def select_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Rows of x picked by a 0/1 selection matrix, so gradients route back through matmul."""
    sel = np.zeros((len(indices), x.shape[0]))
    sel[np.arange(len(indices)), np.asarray(indices, dtype=int)] = 1.0
    return matmul(Tensor(sel), x)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def backward(loss: Tensor, tape: Tape):
    """
    Reverse traversal of ``tape`` starting at ``loss``.
    Leaf accumulators are zeroed first, then every recorded rule adds its contribution.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    leaves = tape.leaves()
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)

    if not loss.requires_grad:
        return

    start = None
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i].output is loss:
            start = i
            break
    if start is None:
        if loss._op is None:
            # the loss is itself a leaf
            loss.grad = np.ones_like(loss.data)
            return
        raise TapeError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: start + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), inp.shape)
            if id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi

    for leaf in leaves:
        if id(leaf) in grads:
            leaf.grad = grads[id(leaf)]


def finite_diff_check(
    f: Callable[[Union[Tensor, Sequence[Tensor]]], Tensor],
    params: Union[Tensor, Sequence[Tensor]],
    step: float = 1e-5,
) -> float:
    """
    Largest |analytic - central difference| / max(1, |central difference|) over all coordinates.
    ``f`` must be deterministic; params are perturbed in place and restored.
    """
    tensors = [params] if isinstance(params, Tensor) else list(params)

    with Tape() as tape:
        loss = f(params)
    backward(loss, tape)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, a_grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(params).item()
            flat[i] = orig - step
            f_minus = f(params).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, abs(a_flat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
