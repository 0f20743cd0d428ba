# layers.py
"""Composite layers on the tensor tape: dense, residual block, recurrent cells.

Sequence activations are laid out ``[batch, channels, length]``; flat
activations ``[batch, features]``.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from tensor import (Tensor, ShapeMismatch, activation, add, concat, conv1d, conv_output_length,
                    dropout, matmul, mul, pool1d, reshape, sigmoid, stack, sub, tanh, transpose)
from utils import DataError

RECURRENT_KINDS = ("rnn", "gru", "lstm")
GATES = {"rnn": 1, "gru": 3, "lstm": 4}


class ShapeComposeError(DataError):
    pass


@dataclass
class RecurrentState:
    hidden: Tensor
    cell: Optional[Tensor] = None


@dataclass
class ConvParams:
    weight: Tensor  # [c_out, c_in, k]
    bias: Tensor    # [c_out]
    stride: int = 1
    padding: int = 0


@dataclass
class GateParams:
    """Fused gate weights: ``wx[in, g*width]``, ``wh[width, g*width]``, ``b[g*width]``.

    GRU gate order is (update, reset, candidate); LSTM is (input, forget,
    candidate, output).
    """
    wx: Tensor
    wh: Tensor
    b: Tensor

    @property
    def width(self) -> int:
        return self.wh.shape[0]


def dense(x: Tensor, w: Tensor, bias: Tensor, act: Optional[str] = None) -> Tensor:
    """``act(x @ w.T + bias)`` for ``x[b, n]`` (or a single row ``x[n]``) and ``w[width, n]``."""
    if x.ndim == 1:
        return reshape(dense(reshape(x, (1, x.shape[0])), w, bias, act), (w.shape[0],))
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"dense: input {x.shape} vs weight {w.shape}")
    if bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"dense: bias {bias.shape} for width {w.shape[0]}")
    out = add(matmul(x, transpose(w, (1, 0))), bias)
    return activation(out, act) if act else out


def residual_block(x: Tensor, conv1: ConvParams, conv2: ConvParams) -> Tensor:
    h1 = activation(conv1d(x, conv1.weight, conv1.bias, conv1.stride, conv1.padding), "relu")
    h2 = activation(conv1d(h1, conv2.weight, conv2.bias, conv2.stride, conv2.padding), "relu")
    if h2.shape != x.shape:
        raise ShapeMismatch(f"residual add: block output {h2.shape} vs input {x.shape}")
    return activation(add(h2, x), "relu")


def _check_step(x_t: Tensor, state: RecurrentState, p_in: int, width: int) -> None:
    if x_t.ndim != 2 or x_t.shape[1] != p_in:
        raise ShapeMismatch(f"recurrent step: input {x_t.shape}, expected [batch, {p_in}]")
    if state.hidden.shape != (x_t.shape[0], width):
        raise ShapeMismatch(f"recurrent step: hidden {state.hidden.shape}, expected {(x_t.shape[0], width)}")


def rnn_step(x_t: Tensor, state: RecurrentState, wx: Tensor, wh: Tensor, b: Tensor) -> RecurrentState:
    """``h_t = tanh(x_t @ wx + h_{t-1} @ wh + b)``."""
    _check_step(x_t, state, wx.shape[0], wh.shape[0])
    pre = add(add(matmul(x_t, wx), matmul(state.hidden, wh)), b)
    return RecurrentState(tanh(pre))


def gru_step(x_t: Tensor, state: RecurrentState, params: GateParams) -> RecurrentState:
    width = params.width
    _check_step(x_t, state, params.wx.shape[0], width)
    h = state.hidden
    xs = add(matmul(x_t, params.wx), params.b)
    hs = matmul(h, params.wh[:, :2 * width])
    z = sigmoid(add(xs[:, :width], hs[:, :width]))
    r = sigmoid(add(xs[:, width:2 * width], hs[:, width:]))
    candidate = tanh(add(xs[:, 2 * width:], matmul(mul(r, h), params.wh[:, 2 * width:])))
    # (1 - z) * h + z * candidate
    return RecurrentState(add(h, mul(z, sub(candidate, h))))


def lstm_step(x_t: Tensor, state: RecurrentState, params: GateParams) -> RecurrentState:
    width = params.width
    _check_step(x_t, state, params.wx.shape[0], width)
    if state.cell is None or state.cell.shape != state.hidden.shape:
        raise ShapeMismatch("lstm step needs a cell state shaped like the hidden state")
    pre = add(add(matmul(x_t, params.wx), matmul(state.hidden, params.wh)), params.b)
    i = sigmoid(pre[:, :width])
    f = sigmoid(pre[:, width:2 * width])
    g = tanh(pre[:, 2 * width:3 * width])
    o = sigmoid(pre[:, 3 * width:])
    cell = add(mul(f, state.cell), mul(i, g))
    return RecurrentState(mul(o, tanh(cell)), cell)


# ---------------------------------------------------------------------------
# layer objects built by archdsl

def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype, gain: float = 6.0) -> Tensor:
    limit = np.sqrt(gain / max(fan_in, 1))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape: tuple, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Layer:
    """One step of a model pipeline; ``out_shape`` is ``(channels, length)`` or ``(features,)``."""
    kind = "layer"

    def __init__(self, in_shape: tuple):
        self.in_shape = tuple(in_shape)
        self.out_shape = self.in_shape

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def forward(self, x: Tensor, training: bool, rng: np.random.Generator) -> Tensor:
        raise NotImplementedError


def _needs_sequence(layer: str, in_shape: tuple) -> None:
    if len(in_shape) != 2:
        raise ShapeComposeError(f"{layer} needs a sequence input, got flat shape {in_shape}")


class Dense(Layer):
    kind = "fc"

    def __init__(self, in_shape, width: int, act: Optional[str], rng, dtype, positionwise: bool = False):
        super().__init__(in_shape)
        self.positionwise = positionwise
        if positionwise:
            _needs_sequence("position-wise FC", in_shape)
            n = in_shape[0]
            self.out_shape = (width, in_shape[1])
        else:
            if len(in_shape) != 1:
                raise ShapeComposeError(f"FC needs a flat input, got {in_shape}")
            n = in_shape[0]
            self.out_shape = (width,)
        self.act = act
        self.weight = uniform_init(rng, (width, n), n, dtype)
        self.bias = zeros_param((width,), dtype)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, training, rng):
        if not self.positionwise:
            return dense(x, self.weight, self.bias, self.act)
        batch, channels, length = x.shape
        rows = reshape(transpose(x, (0, 2, 1)), (batch * length, channels))
        out = dense(rows, self.weight, self.bias, self.act)
        return transpose(reshape(out, (batch, length, self.out_shape[0])), (0, 2, 1))


class Conv(Layer):
    kind = "conv"

    def __init__(self, in_shape, width: int, kernel: int, same: bool, rng, dtype, act: str = "relu"):
        super().__init__(in_shape)
        _needs_sequence("CONV", in_shape)
        channels, length = in_shape
        if same and kernel % 2 == 0:
            raise ShapeComposeError(f"'same' padding needs an odd kernel, got {kernel}")
        padding = (kernel - 1) // 2 if same else 0
        if length + 2 * padding < kernel:
            raise ShapeComposeError(f"CONV kernel {kernel} longer than input length {length}")
        self.params = ConvParams(uniform_init(rng, (width, channels, kernel), channels * kernel, dtype),
                                 zeros_param((width,), dtype), 1, padding)
        self.act = act
        self.out_shape = (width, conv_output_length(length, kernel, 1, padding))

    def parameters(self):
        return [("weight", self.params.weight), ("bias", self.params.bias)]

    def forward(self, x, training, rng):
        p = self.params
        out = conv1d(x, p.weight, p.bias, p.stride, p.padding)
        return activation(out, self.act) if self.act else out


class ResidualBlock(Layer):
    kind = "resblock"

    def __init__(self, in_shape, width: int, kernel: int, rng, dtype):
        super().__init__(in_shape)
        _needs_sequence("Resblock", in_shape)
        if in_shape[0] != width:
            raise ShapeComposeError(f"Resblock of width {width} cannot add to {in_shape[0]} input channels")
        if kernel % 2 == 0:
            raise ShapeComposeError(f"Resblock needs an odd kernel, got {kernel}")
        padding = (kernel - 1) // 2

        def conv_params():
            return ConvParams(uniform_init(rng, (width, width, kernel), width * kernel, dtype),
                              zeros_param((width,), dtype), 1, padding)

        self.conv1, self.conv2 = conv_params(), conv_params()

    def parameters(self):
        return [("conv1.weight", self.conv1.weight), ("conv1.bias", self.conv1.bias),
                ("conv2.weight", self.conv2.weight), ("conv2.bias", self.conv2.bias)]

    def forward(self, x, training, rng):
        return residual_block(x, self.conv1, self.conv2)


class Recurrent(Layer):
    """Consumes the time axis stepwise; channels are the per-step features."""
    kind = "recurrent"

    def __init__(self, in_shape, cell: str, width: int, return_sequences: bool, rng, dtype,
                 forget_bias: float = 1.0):
        super().__init__(in_shape)
        _needs_sequence(cell.upper(), in_shape)
        if cell not in RECURRENT_KINDS:
            raise DataError(f"unknown recurrent cell {cell!r}")
        self.cell, self.width, self.return_sequences = cell, width, return_sequences
        channels, length = in_shape
        gates = GATES[cell]
        self.wx = uniform_init(rng, (channels, gates * width), width, dtype, gain=1.0)
        self.wh = uniform_init(rng, (width, gates * width), width, dtype, gain=1.0)
        bias = np.zeros(gates * width, dtype=dtype)
        if cell == "lstm":
            bias[width:2 * width] = forget_bias
        self.b = Tensor(bias, requires_grad=True)
        self.out_shape = (width, length) if return_sequences else (width,)

    def parameters(self):
        return [("wx", self.wx), ("wh", self.wh), ("b", self.b)]

    def forward(self, x, training, rng):
        batch, _, length = x.shape
        zeros = Tensor(np.zeros((batch, self.width), dtype=self.wx.dtype))
        state = RecurrentState(zeros, zeros if self.cell == "lstm" else None)
        params = GateParams(self.wx, self.wh, self.b)
        hidden = []
        for t in range(length):
            x_t = x[:, :, t]
            if self.cell == "rnn":
                state = rnn_step(x_t, state, self.wx, self.wh, self.b)
            elif self.cell == "gru":
                state = gru_step(x_t, state, params)
            else:
                state = lstm_step(x_t, state, params)
            if self.return_sequences:
                hidden.append(state.hidden)
        return stack(hidden, axis=2) if self.return_sequences else state.hidden


class Pool(Layer):
    kind = "pool"

    def __init__(self, in_shape, pool: str, size: int):
        super().__init__(in_shape)
        _needs_sequence(f"{pool.upper()}POOL", in_shape)
        if in_shape[1] < size:
            raise ShapeComposeError(f"pool size {size} longer than input length {in_shape[1]}")
        self.pool, self.size = pool, size
        self.out_shape = (in_shape[0], in_shape[1] // size)

    def forward(self, x, training, rng):
        return pool1d(x, self.pool, self.size)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, in_shape):
        super().__init__(in_shape)
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x, training, rng):
        return reshape(x, (x.shape[0], -1))


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, in_shape, rate: float):
        super().__init__(in_shape)
        self.rate = rate

    def forward(self, x, training, rng):
        return dropout(x, self.rate, training, rng)


class Activation(Layer):
    kind = "activation"

    def __init__(self, in_shape, act: str):
        super().__init__(in_shape)
        self.act = act

    def forward(self, x, training, rng):
        return activation(x, self.act)


class Concat(Layer):
    """Runs every branch on the same input and joins them along the channel axis."""
    kind = "concat"

    def __init__(self, in_shape, branches: Sequence[Sequence[Layer]]):
        super().__init__(in_shape)
        self.branches = [list(b) for b in branches]
        outs = [b[-1].out_shape if b else self.in_shape for b in self.branches]
        if any(len(s) != len(outs[0]) for s in outs):
            raise ShapeComposeError(f"concatenate branches disagree on rank: {outs}")
        if len(outs[0]) == 2:
            if len({s[1] for s in outs}) != 1:
                raise ShapeComposeError(f"concatenate branches disagree on length: {outs}")
            self.out_shape = (sum(s[0] for s in outs), outs[0][1])
        else:
            self.out_shape = (sum(s[0] for s in outs),)

    def parameters(self):
        named = []
        for i, branch in enumerate(self.branches):
            for j, layer in enumerate(branch):
                named.extend((f"branch{i}.{j}.{name}", p) for name, p in layer.parameters())
        return named

    def forward(self, x, training, rng):
        outs = []
        for branch in self.branches:
            h = x
            for layer in branch:
                h = layer.forward(h, training, rng)
            outs.append(h)
        return concat(outs, axis=1)
