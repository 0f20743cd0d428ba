# tensor.py
"""Dense n-dimensional arrays with a reverse-mode gradient tape.

Operations record a node on the active ``Tape`` whenever one of their inputs
requires a gradient. ``backward`` sweeps the tape once, newest node first,
and accumulates gradients additively across fan-out.

    with Tape() as tape:
        loss = mean_all(relu(matmul(x, w)))
    grads = backward(tape, loss)
"""
import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils import DataError

DEFAULT_DTYPE = np.float32

ACTIVATIONS = ("relu", "tanh", "sigmoid")
POOLS = ("avg", "max")


class ShapeMismatch(DataError):
    pass


class KernelLargerThanInput(DataError):
    pass


class NonScalarLoss(DataError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is None:
            is_float_array = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if is_float_array else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Append-only list of nodes; inputs always precede the nodes using them."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.visits = 0
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None


_active_tape: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar("active_tape", default=None)


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def _record(op: str, inputs: tuple, data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(np.asarray(data))
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_node = len(tape.nodes)
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


class _Scatter:
    """Gradient that is non-zero only at ``key`` of an array of ``shape``."""
    __slots__ = ("shape", "key", "values")

    def __init__(self, shape, key, values):
        self.shape, self.key, self.values = shape, key, values


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in keys)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accumulate(store: dict, key, tensor: Tensor, g) -> None:
    # store values are [array, owned]; only owned arrays are updated in place
    slot = store.get(key)
    if isinstance(g, _Scatter):
        if slot is None:
            slot = store[key] = [np.zeros(g.shape, dtype=g.values.dtype), True]
        elif not slot[1]:
            slot[0], slot[1] = slot[0].copy(), True
        if _is_basic(g.key):
            slot[0][g.key] += g.values
        else:
            np.add.at(slot[0], g.key, g.values)
        return
    g = _unbroadcast(np.asarray(g), tensor.shape)
    if slot is None:
        store[key] = [g, False]
    elif slot[1]:
        slot[0] += g
    else:
        slot[0], slot[1] = slot[0] + g, True


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep from ``loss``; returns ``{leaf tensor: gradient}``.

    Leaf gradients are also accumulated into ``leaf.grad``.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape.visits = 0
    if loss.tape_node is None:
        return {}

    grads: dict[int, list] = {loss.tape_node: [np.ones_like(loss.data), False]}
    leaves: dict[int, list] = {}
    leaf_tensors: dict[int, Tensor] = {}
    for index in range(loss.tape_node, -1, -1):
        node = tape.nodes[index]
        tape.visits += 1
        slot = grads.pop(index, None)
        if slot is None:
            continue
        for inp, g in zip(node.inputs, node.backward(slot[0])):
            if g is None or not inp.requires_grad:
                continue
            if inp.tape_node is not None:
                _accumulate(grads, inp.tape_node, inp, g)
            else:
                leaf_tensors[id(inp)] = inp
                _accumulate(leaves, id(inp), inp, g)

    result = {}
    for key, (g, _) in leaves.items():
        leaf = leaf_tensors[key]
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    def grad(g):
        return (g * exponent * np.power(a.data, exponent - 1),)
    return _record("power", (a,), np.power(a.data, exponent), grad)


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def sum_all(a: Tensor) -> Tensor:
    # 64-bit accumulation
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _record("sum", (a,), total, lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    total = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _record("mean", (a,), total, lambda g: (np.broadcast_to(g / n, a.shape),))


# ---------------------------------------------------------------------------
# shape

def reshape(a: Tensor, shape) -> Tensor:
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, key) -> Tensor:
    return _record("getitem", (a,), a.data[key], lambda g: (_Scatter(a.shape, key, g),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from e
    return _record("concat", tensors, data, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"stack: {e}") from e

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _record("stack", tensors, data, grad)


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _const(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over ``x[batch, c_in, l]`` (or ``x[c_in, l]``) with ``w[c_out, c_in, k]``."""
    if x.ndim == 2:
        out = conv1d(reshape(x, (1,) + x.shape), w, b, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} vs kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1d: bias {b.shape} for {w.shape[0]} filters")
    if stride < 1 or padding < 0:
        raise DataError("conv1d needs stride >= 1 and padding >= 0")

    batch, c_in, length = x.shape
    c_out, _, kernel = w.shape
    padded = length + 2 * padding
    if padded < kernel:
        raise KernelLargerThanInput(f"kernel {kernel} > padded length {padded}")
    m = conv_output_length(length, kernel, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :][:, :, :m, :]
    cols = windows.transpose(0, 2, 1, 3).reshape(batch * m, c_in * kernel)
    w2 = w.data.reshape(c_out, c_in * kernel)
    out = (cols @ w2.T).reshape(batch, m, c_out).transpose(0, 2, 1) + b.data[None, :, None]

    def grad(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * m, c_out)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g.sum(axis=(0, 2))
        dcols = (g2 @ w2).reshape(batch, m, c_in, kernel)
        dxp = np.zeros((batch, c_in, padded), dtype=g.dtype)
        span = stride * (m - 1) + 1
        for j in range(kernel):
            dxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dxp[:, :, padding:padding + length], dw, db

    return _record("conv1d", (x, w, b), out, grad)


def pool1d(x: Tensor, kind: str, size: int) -> Tensor:
    """Non-overlapping pooling along the last axis; the trailing remainder is dropped."""
    if kind not in POOLS:
        raise DataError(f"unknown pool kind {kind!r}")
    if size < 1:
        raise DataError("pool size must be >= 1")
    length = x.shape[-1]
    m = length // size
    lead = x.shape[:-1]
    windows = x.data[..., :m * size].reshape(lead + (m, size))

    if kind == "avg":
        out = windows.mean(axis=-1)

        def grad(g):
            dx = np.zeros(x.shape, dtype=g.dtype)
            dx[..., :m * size] = np.repeat(g / size, size, axis=-1)
            return (dx,)
    else:
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

        def grad(g):
            dwin = np.zeros(lead + (m, size), dtype=g.dtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = np.zeros(x.shape, dtype=g.dtype)
            dx[..., :m * size] = dwin.reshape(lead + (m * size,))
            return (dx,)

    return _record(f"{kind}pool", (x,), out, grad)


# ---------------------------------------------------------------------------
# nonlinearities and regularization

def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        out = np.maximum(x.data, 0)
        return _record("relu", (x,), out, lambda g: (g * (x.data > 0),))
    if kind == "tanh":
        out = np.tanh(x.data)
        return _record("tanh", (x,), out, lambda g: (g * (1 - out * out),))
    if kind == "sigmoid":
        out = _sigmoid(x.data)
        return _record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))
    raise DataError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def dropout(x: Tensor, rate: float, training: bool, seed=None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if not 0 <= rate < 1:
        raise DataError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# gradient checking

def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-3,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``tensor`` (flat ``indices`` only, if given)."""
    flat = tensor.data.reshape(-1)
    chosen = range(flat.size) if indices is None else indices
    grad = np.zeros(len(chosen), dtype=np.float64)
    for n, i in enumerate(chosen):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(np.asarray(fn().data, dtype=np.float64).sum())
        flat[i] = orig - eps
        minus = float(np.asarray(fn().data, dtype=np.float64).sum())
        flat[i] = orig
        grad[n] = (plus - minus) / (2 * eps)
    return grad if indices is not None else grad.reshape(tensor.shape)


def relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """Largest elementwise ``|a - n| / max(|a| + |n|, floor)``.

    ``floor`` keeps entries where both gradients are near zero from dominating on rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    ratio = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
    return float(ratio.max(initial=0.0))
