# tests/test_layers.py
import numpy as np
import pytest

from layers import (Concat, Conv, ConvParams, Dense, GateParams, Pool, RecurrentState, Recurrent, ResidualBlock,
                    ShapeComposeError, dense, gru_step, lstm_step, residual_block, rnn_step)
from tensor import ShapeMismatch, Tape, Tensor, backward, mean_all, mul, numeric_gradient, relative_error, sum_all


def _t(values, grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=grad)


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def _check(build, tensors, tol=1e-3):
    with Tape() as tape:
        out = build()
    grads = backward(tape, out)
    for t in tensors:
        assert relative_error(grads[t], numeric_gradient(build, t, eps=1e-6)) < tol


# ---------------------------------------------------------------------------
# dense and residual

def test_dense_examples():
    out = dense(_t([-1.0, 2.0]), _t(np.eye(2)), _t([0.0, 0.0]), "relu")
    assert out.data.tolist() == [0.0, 2.0]
    assert dense(_t([1.0, 1.0]), _t([[1.0, 1.0]]), _t([-2.0]), "relu").data.tolist() == [0.0]
    with pytest.raises(ShapeMismatch):
        dense(_t([[1.0, 2.0, 3.0]]), _t(np.eye(2)), _t([0.0, 0.0]))


def test_dense_gradient(rng):
    x, w, b = _t(rng.standard_normal((2, 3)), True), _t(rng.standard_normal((4, 3)), True), _t(rng.standard_normal(4), True)
    _check(lambda: sum_all(dense(x, w, b, "tanh")), [x, w, b])


def _conv(weight, bias, padding=0):
    return ConvParams(_t(weight, True), _t(bias, True), 1, padding)


def test_residual_with_zero_convs_is_relu(rng):
    x = _t(rng.standard_normal((1, 2, 6)))
    zeros = _conv(np.zeros((2, 2, 3)), np.zeros(2), padding=1)
    out = residual_block(x, zeros, zeros)
    np.testing.assert_array_equal(out.data, np.maximum(x.data, 0))


def test_residual_on_zero_input_by_hand():
    x = _t(np.zeros((1, 1, 4)))
    out = residual_block(x, _conv([[[1.0]]], [0.5]), _conv([[[2.0]]], [-0.2]))
    # relu(relu(2 * relu(0.5) - 0.2) + 0)
    np.testing.assert_allclose(out.data, np.full((1, 1, 4), 0.8))


def test_residual_gradient(rng):
    x = _t(rng.standard_normal((2, 3, 7)), True)
    c1 = _conv(rng.standard_normal((3, 3, 3)), rng.standard_normal(3), padding=1)
    c2 = _conv(rng.standard_normal((3, 3, 3)), rng.standard_normal(3), padding=1)
    _check(lambda: sum_all(residual_block(x, c1, c2)), [x, c1.weight, c2.weight, c1.bias, c2.bias])


def test_residual_shape_mismatch(rng):
    x = _t(rng.standard_normal((1, 2, 6)))
    valid = _conv(rng.standard_normal((2, 2, 3)), np.zeros(2))
    with pytest.raises(ShapeMismatch):
        residual_block(x, valid, valid)


# ---------------------------------------------------------------------------
# recurrent cells

def test_rnn_zero_weights_give_tanh_bias():
    state = RecurrentState(_t([[0.3, -0.1]]))
    out = rnn_step(_t([[5.0]]), state, _t(np.zeros((1, 2))), _t(np.zeros((2, 2))), _t([0.2, -0.4]))
    np.testing.assert_allclose(out.hidden.data, np.tanh([[0.2, -0.4]]))


def test_rnn_two_steps_by_hand():
    wx, wh, b = 0.7, -0.4, 0.1
    x1, x2 = 0.5, -1.5
    state = RecurrentState(_t([[0.0]]))
    for x in (x1, x2):
        state = rnn_step(_t([[x]]), state, _t([[wx]]), _t([[wh]]), _t([b]))
    expected = np.tanh(wx * x2 + wh * np.tanh(wx * x1 + b) + b)
    assert state.hidden.data[0, 0] == pytest.approx(expected, abs=1e-12)


def _gates(wx, wh, b):
    return GateParams(_t([wx]), _t([wh]), _t(b))


def test_gru_update_gate_extremes():
    h = _t([[0.6]])
    closed = gru_step(_t([[1.0]]), RecurrentState(h), _gates([0.0, 0.5, 0.8], [0.0, 0.3, 0.2], [-50.0, 0.0, 0.0]))
    assert closed.hidden.data[0, 0] == pytest.approx(0.6, abs=1e-9)

    opened = gru_step(_t([[1.0]]), RecurrentState(h), _gates([0.0, 0.5, 0.8], [0.0, 0.3, 0.2], [50.0, 0.0, 0.1]))
    r = _sig(0.5 + 0.3 * 0.6)
    assert opened.hidden.data[0, 0] == pytest.approx(np.tanh(0.8 + 0.1 + 0.2 * r * 0.6), abs=1e-9)


def test_gru_matches_gate_formulas(rng):
    (xz, xr, xn), (hz, hr, hn), (bz, br, bn) = rng.standard_normal((3, 3))
    x, h = 0.9, -0.3
    out = gru_step(_t([[x]]), RecurrentState(_t([[h]])), _gates([xz, xr, xn], [hz, hr, hn], [bz, br, bn]))
    z = _sig(xz * x + hz * h + bz)
    r = _sig(xr * x + hr * h + br)
    n = np.tanh(xn * x + bn + hn * (r * h))
    assert out.hidden.data[0, 0] == pytest.approx((1 - z) * h + z * n, abs=1e-6)


def test_lstm_gate_extremes():
    state = RecurrentState(_t([[0.2]]), _t([[0.7]]))
    # input gate shut, forget gate open
    carry = lstm_step(_t([[1.0]]), state, _gates([0.0] * 4, [0.0] * 4, [-50.0, 50.0, 0.3, 0.0]))
    assert carry.cell.data[0, 0] == pytest.approx(0.7, abs=1e-9)
    # output gate shut
    silent = lstm_step(_t([[1.0]]), state, _gates([0.0] * 4, [0.0] * 4, [0.0, 0.0, 0.3, -50.0]))
    assert silent.hidden.data[0, 0] == pytest.approx(0.0, abs=1e-9)


def test_lstm_matches_gate_formulas(rng):
    wx, wh, b = rng.standard_normal((3, 4))
    x, h, c = -0.4, 0.5, 0.25
    out = lstm_step(_t([[x]]), RecurrentState(_t([[h]]), _t([[c]])), _gates(list(wx), list(wh), list(b)))
    pre = wx * x + wh * h + b
    i, f, g, o = _sig(pre[0]), _sig(pre[1]), np.tanh(pre[2]), _sig(pre[3])
    cell = f * c + i * g
    assert out.cell.data[0, 0] == pytest.approx(cell, abs=1e-6)
    assert out.hidden.data[0, 0] == pytest.approx(o * np.tanh(cell), abs=1e-6)


def test_step_shape_checks(rng):
    with pytest.raises(ShapeMismatch):
        rnn_step(_t([[1.0, 2.0]]), RecurrentState(_t([[0.0]])), _t([[1.0]]), _t([[1.0]]), _t([0.0]))
    with pytest.raises(ShapeMismatch):
        lstm_step(_t([[1.0]]), RecurrentState(_t([[0.0]])), _gates([0.0] * 4, [0.0] * 4, [0.0] * 4))


@pytest.mark.parametrize("cell", ["rnn", "gru", "lstm"])
def test_bptt_gradient(rng, cell):
    layer = Recurrent((2, 6), cell, 3, return_sequences=False, rng=rng, dtype=np.float64)
    x = _t(rng.standard_normal((2, 2, 6)), True)
    _check(lambda: sum_all(mul(layer.forward(x, False, rng), layer.forward(x, False, rng))),
           [x, layer.wx, layer.wh, layer.b])


# ---------------------------------------------------------------------------
# layer objects

def test_layer_shapes(rng):
    assert Conv((4, 391), 32, 3, True, rng, np.float64).out_shape == (32, 391)
    assert Conv((4, 391), 6, 7, False, rng, np.float64).out_shape == (6, 385)
    assert Pool((6, 385), "avg", 3).out_shape == (6, 128)
    assert Recurrent((1, 10), "gru", 8, True, rng, np.float64).out_shape == (8, 10)
    assert Recurrent((1, 10), "lstm", 8, False, rng, np.float64).out_shape == (8,)
    assert Dense((5, 10), 16, "relu", rng, np.float64, positionwise=True).out_shape == (16, 10)


def test_layer_composition_errors(rng):
    with pytest.raises(ShapeComposeError):
        Dense((5, 10), 16, "relu", rng, np.float64)
    with pytest.raises(ShapeComposeError):
        Conv((32,), 8, 3, True, rng, np.float64)
    with pytest.raises(ShapeComposeError):
        ResidualBlock((16, 10), 32, 3, rng, np.float64)
    with pytest.raises(ShapeComposeError):
        Pool((4, 2), "max", 3)
    short = [Conv((1, 12), 4, 3, False, rng, np.float64)]
    same = [Conv((1, 12), 4, 3, True, rng, np.float64)]
    with pytest.raises(ShapeComposeError):
        Concat((1, 12), [short, same])


def test_positionwise_dense_matches_rowwise(rng):
    layer = Dense((3, 5), 4, "relu", rng, np.float64, positionwise=True)
    x = _t(rng.standard_normal((2, 3, 5)))
    out = layer.forward(x, False, rng).data
    for t in range(5):
        expected = np.maximum(x.data[:, :, t] @ layer.weight.data.T + layer.bias.data, 0)
        np.testing.assert_allclose(out[:, :, t], expected)


def test_lstm_forget_bias_starts_at_one(rng):
    layer = Recurrent((1, 4), "lstm", 3, False, rng, np.float64)
    np.testing.assert_array_equal(layer.b.data, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    assert mean_all(layer.forward(_t(np.zeros((1, 1, 4))), False, rng)).data == 0
