"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output tensor.
``backward`` orders the recorded graph topologically (the tape) and replays
the rules in reverse, visiting each node once and accumulating gradients
additively into every tensor that requires them.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation on finite inputs produces NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them; outputs are constants."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        finite_inputs = all(np.all(np.isfinite(p.data)) for p in parents)
        if finite_inputs:
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    active = a.data > 0

    def bw(g):
        a._accumulate(g * active)

    return _result(np.where(active, a.data, 0.0), (a,), bw, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out * out))

    return _result(out, (a,), bw, "tanh")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p`` is 0 or no generator is given."""
    if p <= 0.0 or rng is None:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)

    def bw(g):
        a._accumulate(g * keep)

    return _result(a.data * keep, (a,), bw, "dropout")


# ---------------------------------------------------------------------------
# shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        a._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(a.data, axes), (a,), bw, "transpose")


def transpose_last_two(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last_two needs rank >= 2, got {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _result(out, (a,), bw, "reshape")


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise DimensionError(f"concat_last: leading shapes differ: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[..., lo:hi])

    return _result(np.concatenate([t.data for t in tensors], axis=-1), tensors, bw, "concat")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _result(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _result(table.data[ids], (table,), bw, "gather_rows")


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.array(a.data.sum()), (a,), bw, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _result(np.array(a.data.mean()), (a,), bw, "mean")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (a,), bw, "softmax")


def _log_softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_rows(a: Tensor) -> Tensor:
    out = _log_softmax_array(a.data)
    probs = np.exp(out)

    def bw(g):
        a._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return _result(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            x._accumulate(
                inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            )

    return _result(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# losses


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    return masked_mse(a, b, None)


def masked_mse(a, b, mask) -> Tensor:
    """Squared error averaged over positions where ``mask`` is true.

    ``mask`` broadcasts against the operands; the divisor is the number of
    operand elements it selects.  ``None`` selects everything.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"masked_mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    if mask is None:
        w = None
        count = diff.size
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=DTYPE), diff.shape)
        count = float(w.sum())
        if count == 0:
            raise ValueError("masked_mse: mask selects no elements")
        diff = diff * w
    value = np.array((diff * diff).sum() / count)

    def bw(g):
        gd = (2.0 * g / count) * diff
        if a.requires_grad:
            a._accumulate(gd)
        if b.requires_grad:
            b._accumulate(-gd)

    return _result(value, (a, b), bw, "mse")


def soft_cross_entropy(teacher_logits, student_logits: Tensor, t: float = 1.0) -> Tensor:
    """Batch mean of -sum_c softmax(z_T/t)_c * log softmax(z_S/t)_c.

    The teacher side is a constant: no gradient reaches it.
    """
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    zt = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=DTYPE)
    student_logits = as_tensor(student_logits)
    if zt.shape != student_logits.shape:
        raise DimensionError(f"soft_cross_entropy: shapes {zt.shape} and {student_logits.shape} differ")
    p = np.exp(_log_softmax_array(zt / t))
    logq = _log_softmax_array(student_logits.data / t)
    rows = p.size // p.shape[-1]
    value = np.array(-(p * logq).sum() / rows)

    def bw(g):
        q = np.exp(logq)
        student_logits._accumulate(g * (q * p.sum(axis=-1, keepdims=True) - p) / (t * rows))

    return _result(value, (student_logits,), bw, "soft_ce")


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    An optional boolean ``mask`` over the label positions restricts the mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    logp = _log_softmax_array(logits.data)
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    if mask is not None:
        onehot = onehot * np.asarray(mask, dtype=DTYPE)[..., None]
    count = float(onehot.sum())
    if count == 0:
        raise ValueError("cross_entropy: no labelled positions")
    value = np.array(-(onehot * logp).sum() / count)

    def bw(g):
        probs = np.exp(logp)
        logits._accumulate(g * (probs * onehot.sum(axis=-1, keepdims=True) - onehot) / count)

    return _result(value, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# tape


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor requiring it that ``loss`` depends on."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    interior = [n for n in order if n._backward is not None]
    for node in interior:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(interior):
        if node.grad is not None:
            node._backward(node.grad)
    for node in interior:
        if node is not loss:
            node.grad = None
        node._parents = ()
        node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)
