# tests/test_archdsl.py
import logging

import numpy as np
import pytest

from archdsl import (DEFAULT_ARCHITECTURES, PUBLISHED_ARCHITECTURES, ROBUSTNESS_VARIANTS, ArchSyntaxError, LayerKind,
                     LayerSpec, ModelName, NonPositiveWidth, UnknownLayerKind, build_model, expand_variant,
                     load_checkpoint, parse_arch, render)
from layers import Concat, Conv, Pool, ResidualBlock, ShapeComposeError
from tensor import ShapeMismatch, Tape, backward, numeric_gradient, relative_error
from train import loss
from utils import DataError


# ---------------------------------------------------------------------------
# parsing

def test_parse_fc_chain():
    assert parse_arch("FC(32)-FC(64)-FC(1)") == [LayerSpec(LayerKind.FC, 32), LayerSpec(LayerKind.FC, 64),
                                                 LayerSpec(LayerKind.FC, 1)]


def test_parse_resblock_repeat():
    (block,) = parse_arch("Resblock(CONV(64)-CONV(64))*6")
    assert block.kind is LayerKind.RESBLOCK
    assert block.repeat == 6
    assert [s.width for s in block.branches[0]] == [64, 64]


def test_parse_kernels_pools_and_aliases():
    specs = parse_arch("CNN(8, 5) - MAXPOOL(2) - DROPOUT(20) - relu - FLATTEN - FC(1)")
    assert specs[0] == LayerSpec(LayerKind.CONV, 8, 5)
    assert [s.kind for s in specs[1:]] == [LayerKind.MAXPOOL, LayerKind.DROPOUT, LayerKind.ACTIVATION,
                                           LayerKind.FLATTEN, LayerKind.FC]
    assert specs[3].act == "relu"


def test_parse_errors_carry_offsets():
    with pytest.raises(NonPositiveWidth) as err:
        parse_arch("FC(0)")
    assert err.value.offset == 3
    with pytest.raises(UnknownLayerKind) as err:
        parse_arch("FC(32)-XYZ(3)")
    assert err.value.offset == 7
    with pytest.raises(ArchSyntaxError) as err:
        parse_arch("FC(32")
    assert err.value.offset == 5
    for bad in ("", "FC(32)-", "FC(32))", "(stack FC(1))"):
        with pytest.raises(ArchSyntaxError):
            parse_arch(bad)
    assert issubclass(ArchSyntaxError, DataError)


def test_unbalanced_table_strings_are_repaired(caplog):
    with caplog.at_level(logging.WARNING, logger="archdsl"):
        resnet = render(parse_arch(PUBLISHED_ARCHITECTURES[ModelName.RESNET]))
        mcnn = render(parse_arch(PUBLISHED_ARCHITECTURES[ModelName.MCNN]))
    assert resnet == "CONV(64)-Resblock(CONV(64)-CONV(64))*6-FC(1)"
    assert mcnn == "(concatenate CONV(32), CONV(64), CONV(128))-FC(64)-FC(1)"
    assert sum("missing ')'" in r.message for r in caplog.records) == 2


@pytest.mark.parametrize("name", list(ModelName))
def test_render_round_trip(name):
    for table in (PUBLISHED_ARCHITECTURES, DEFAULT_ARCHITECTURES):
        specs = parse_arch(table[name])
        assert parse_arch(render(specs)) == specs


def test_render_round_trip_variants():
    for name, variants in ROBUSTNESS_VARIANTS.items():
        for variant in variants:
            specs = parse_arch(expand_variant(name, variant))
            assert parse_arch(render(specs)) == specs


def test_expand_variant():
    assert expand_variant("MLP", "32-32-64") == "FC(32)-FC(32)-FC(64)-FC(1)"
    assert expand_variant("LSTM", "8-16") == "LSTM(8)-LSTM(16)-FC(1)"
    assert expand_variant("ResNet", "32-32-64") == \
        "CONV(32)-Resblock(CONV(32)-CONV(32))*2-CONV(64)-Resblock(CONV(64)-CONV(64))*1-FC(1)"
    assert expand_variant("CNN", "FC(3)-FC(1)") == "FC(3)-FC(1)"
    with pytest.raises(DataError):
        expand_variant("MCNN", "32-64")
    with pytest.raises(NonPositiveWidth):
        expand_variant("MLP", "32-0")


def test_model_name_aliases():
    assert ModelName.parse("time-cnn") is ModelName.TIMECNN
    assert ModelName.parse("tcnn") is ModelName.TIMECNN
    assert ModelName.parse("resnet") is ModelName.RESNET
    with pytest.raises(DataError):
        ModelName.parse("transformer")


# ---------------------------------------------------------------------------
# building

def test_mlp_parameter_count():
    model = build_model("MLP", (391, 1))
    expected = (391 * 32 + 32) + (32 * 64 + 64) + (64 * 64 + 64) + (64 * 128 + 128) + (128 * 1 + 1)
    assert model.parameter_count() == expected == 27_265


def test_mcnn_branches():
    model = build_model("MCNN", (391, 4))
    (join,) = [layer for layer in model.layers if isinstance(layer, Concat)]
    convs = [branch[0] for branch in join.branches]
    assert [c.params.weight.shape[2] for c in convs] == [5, 7, 9]
    assert [c.out_shape[0] for c in convs] == [32, 64, 128]
    assert all(isinstance(branch[1], Pool) for branch in join.branches)


def test_resnet_blocks():
    model = build_model("ResNet", (391, 1))
    blocks = [layer for layer in model.layers if isinstance(layer, ResidualBlock)]
    assert len(blocks) == 6
    assert all(b.conv1.weight.shape == (64, 64, 3) and b.conv2.weight.shape == (64, 64, 3) for b in blocks)


def test_timecnn_uses_valid_kernel_seven():
    model = build_model("TimeCNN", (391, 1))
    convs = [layer for layer in model.layers if isinstance(layer, Conv)]
    assert [c.out_shape for c in convs] == [(6, 385), (12, 122)]


def test_recurrent_stack_returns_sequence_only_when_needed():
    model = build_model("GRU", (20, 1))
    assert [layer.out_shape for layer in model.layers][:2] == [(32, 20), (32,)]


@pytest.mark.parametrize("name", list(ModelName))
def test_outputs_are_probabilities(name, rng):
    length = 48 if name is ModelName.TIMECNN else 32
    model = build_model(name, (length, 4), seed=1, width_scale=0.25)
    out = model.predict_proba(rng.standard_normal((3, length, 4)))
    assert out.shape == (3,)
    assert np.all((out > 0) & (out < 1))


def test_seed_determinism(rng):
    X = rng.standard_normal((2, 32, 1))
    a = build_model("CNN", (32, 1), seed=5).predict_proba(X)
    b = build_model("CNN", (32, 1), seed=5).predict_proba(X)
    c = build_model("CNN", (32, 1), seed=6).predict_proba(X)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_forward_checks_input_shape(rng):
    model = build_model("MLP", (32, 1))
    with pytest.raises(ShapeMismatch):
        model.forward(rng.standard_normal((2, 31, 1)))


def test_build_errors():
    with pytest.raises(ShapeComposeError):
        build_model("CNN", (32, 1), overrides="CONV(8)-FC(2)")
    with pytest.raises(ShapeComposeError):
        build_model("CNN", (32, 1), overrides="CONV(8)-FC(8)")
    with pytest.raises(ShapeComposeError):
        build_model("ResNet", (32, 1), overrides="CONV(8)-Resblock(CONV(8)-CONV(16))*2-FC(1)")
    with pytest.raises(ShapeComposeError):
        build_model("CNN", (32, 1), overrides="CONV(8)-AVGPOOL(64)-FC(1)")


def test_width_scale_and_dropout_in_arch():
    model = build_model("MLP", (32, 1), width_scale=0.5, dropout=0.2)
    assert model.arch == "FC(16)-DROPOUT(20)-FC(32)-DROPOUT(20)-FC(32)-DROPOUT(20)-FC(64)-DROPOUT(20)-FC(1)"


def test_autoencoder_bottleneck_is_positionwise():
    model = build_model("Autoencoder", (16, 1), width_scale=0.125)
    dense = [layer for layer in model.layers if layer.kind == "fc"]
    assert dense[0].positionwise and dense[0].out_shape == (32, 16)
    assert not dense[-1].positionwise and dense[-1].out_shape == (1,)


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model("MCNN", (32, 2), seed=3, width_scale=0.25, dropout=0.1)
    for _, p in model.parameters():
        p.data = p.data + np.float32(0.01)
    path = model.save_checkpoint(tmp_path / "ckpt" / "mcnn")
    assert path.suffix == ".json"
    loaded = load_checkpoint(tmp_path / "ckpt" / "mcnn")
    assert loaded.arch == model.arch
    X = rng.standard_normal((4, 32, 2))
    np.testing.assert_array_equal(loaded.predict_proba(X), model.predict_proba(X))


def test_checkpoint_rejects_truncated_blob(tmp_path):
    model = build_model("MLP", (8, 1), width_scale=0.25)
    model.save_checkpoint(tmp_path / "m")
    blob = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(blob + b"\0\0\0\0")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "m")


# ---------------------------------------------------------------------------
# end-to-end gradients

@pytest.mark.parametrize("name", list(ModelName))
def test_model_gradients(name):
    rng = np.random.default_rng(11)
    length = 48 if name is ModelName.TIMECNN else 32
    model = build_model(name, (length, 2), seed=2, width_scale=0.125, dtype=np.float64)
    X = rng.standard_normal((3, length, 2))
    y = np.array([1, 0, 1])

    def objective():
        return loss("bce", model.forward(X)[:, 0], y)

    with Tape() as tape:
        value = objective()
    grads = backward(tape, value)
    params = [p for _, p in model.parameters()]
    assert set(grads) == set(params)
    for p in params:
        idx = rng.choice(p.size, size=min(p.size, 5), replace=False)
        analytic = grads[p].reshape(-1)[idx]
        numeric = numeric_gradient(objective, p, eps=1e-6, indices=idx)
        # near-zero gradients are compared absolutely
        assert relative_error(analytic, numeric) < 1e-3 or np.allclose(analytic, numeric, rtol=0, atol=1e-7)
