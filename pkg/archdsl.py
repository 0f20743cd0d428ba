# archdsl.py
"""Architecture notation: ``FC(32)-FC(64)-FC(1)``, ``Resblock(CONV(64)-CONV(64))*6``,
``(concatenate CONV(32,5), CONV(64,7))``.

``parse_arch`` turns notation into ``LayerSpec`` trees, ``render`` turns them
back into canonical notation and ``build_model`` lowers them onto the layers
in ``layers.py`` for a given input shape.
"""
import json
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from layers import (Activation, Concat, Conv, Dense, Dropout, Flatten, Layer, Pool, Recurrent,
                    ResidualBlock, ShapeComposeError)
from tensor import Tensor, ShapeMismatch, transpose
from utils import DataError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class ArchSyntaxError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownLayerKind(ArchSyntaxError):
    pass


class NonPositiveWidth(ArchSyntaxError):
    pass


class LayerKind(str, Enum):
    FC = "FC"
    CONV = "CONV"
    RNN = "RNN"
    GRU = "GRU"
    LSTM = "LSTM"
    RESBLOCK = "Resblock"
    AVGPOOL = "AVGPOOL"
    MAXPOOL = "MAXPOOL"
    FLATTEN = "FLATTEN"
    CONCAT = "concatenate"
    DROPOUT = "DROPOUT"
    ACTIVATION = "ACTIVATION"


class ModelName(str, Enum):
    MLP = "MLP"
    CNN = "CNN"
    RESNET = "ResNet"
    RNN = "RNN"
    GRU = "GRU"
    LSTM = "LSTM"
    AUTOENCODER = "Autoencoder"
    TIMECNN = "TimeCNN"
    MCNN = "MCNN"

    @classmethod
    def parse(cls, text) -> "ModelName":
        if isinstance(text, cls):
            return text
        key = re.sub(r"[-_\s]", "", str(text)).lower()
        aliases = {"tcnn": "timecnn", "multichannelcnn": "mcnn"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value.lower() == key:
                return member
        raise DataError(f"unknown model {text!r}; expected one of {[m.value for m in cls]}")


_SIZED_KINDS = {
    "FC": LayerKind.FC,
    "CONV": LayerKind.CONV,
    "CNN": LayerKind.CONV,
    "RNN": LayerKind.RNN,
    "GRU": LayerKind.GRU,
    "LSTM": LayerKind.LSTM,
    "AVGPOOL": LayerKind.AVGPOOL,
    "MAXPOOL": LayerKind.MAXPOOL,
    "DROPOUT": LayerKind.DROPOUT,
}
_BARE_KINDS = {"FLATTEN", "RELU", "TANH", "SIGMOID"}
_RECURRENT = {LayerKind.RNN: "rnn", LayerKind.GRU: "gru", LayerKind.LSTM: "lstm"}
_SEQUENCE_CONSUMERS = {LayerKind.CONV, LayerKind.RESBLOCK, LayerKind.RNN, LayerKind.GRU, LayerKind.LSTM,
                       LayerKind.AVGPOOL, LayerKind.MAXPOOL, LayerKind.CONCAT}


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    width: Optional[int] = None
    kernel: Optional[int] = None
    repeat: int = 1
    # Resblock body is branches[0]; concatenate has one entry per branch
    branches: tuple = ()
    act: Optional[str] = None


PUBLISHED_ARCHITECTURES = {
    ModelName.MLP: "FC(32)-FC(64)-FC(64)-FC(128)-FC(1)",
    ModelName.CNN: "CONV(32)-CONV(64)-CONV(64)-CONV(128)-FC(1)",
    ModelName.RESNET: "CONV(64)- Resblock(CONV(64)-CONV(64)*6-FC(1)",
    ModelName.RNN: "RNN(32)-RNN(32)-FC(1)",
    ModelName.GRU: "GRU(32)-GRU(32)-FC(1)",
    ModelName.LSTM: "LSTM(32)-LSTM(32)-FC(1)",
    ModelName.AUTOENCODER: "CONV(64)-CONV(128)-CONV(256)-FC(256)-CONV(256)-CONV(128)-CONV(64)-FC(1)",
    ModelName.TIMECNN: "CONV(6)-CONV(12)-FC(1)",
    ModelName.MCNN: "(concatenate CNN(32), CNN(64), CNN(128)-FC(64)-FC(1)",
}

# with explicit kernels and pooling
DEFAULT_ARCHITECTURES = {
    ModelName.MLP: "FC(32)-FC(64)-FC(64)-FC(128)-FC(1)",
    ModelName.CNN: "CONV(32,3)-CONV(64,3)-CONV(64,3)-CONV(128,3)-FC(1)",
    ModelName.RESNET: "CONV(64,3)-Resblock(CONV(64,3)-CONV(64,3))*6-FC(1)",
    ModelName.RNN: "RNN(32)-RNN(32)-FC(1)",
    ModelName.GRU: "GRU(32)-GRU(32)-FC(1)",
    ModelName.LSTM: "LSTM(32)-LSTM(32)-FC(1)",
    ModelName.AUTOENCODER: "CONV(64,3)-CONV(128,3)-CONV(256,3)-FC(256)-CONV(256,3)-CONV(128,3)-CONV(64,3)-FC(1)",
    ModelName.TIMECNN: "CONV(6,7)-AVGPOOL(3)-CONV(12,7)-AVGPOOL(3)-FC(1)",
    ModelName.MCNN: "(concatenate CONV(32,5)-MAXPOOL(2), CONV(64,7)-MAXPOOL(2), CONV(128,9)-MAXPOOL(2))-FC(64)-FC(1)",
}

# baseline, simpler, more complex
ROBUSTNESS_VARIANTS = {
    ModelName.MLP: ("32-64-64-128", "32-32-64", "32-64-128-256-512"),
    ModelName.CNN: ("32-64-64-128", "32-32-64", "32-32-64-64-128-128"),
    ModelName.RESNET: ("64-64-64-64-64-64", "32-32-32-32", "32-32-32-64-64-64-128-128-128"),
    ModelName.LSTM: ("32-32", "8-16", "32-64-64-128"),
    ModelName.GRU: ("32-32", "8-16", "32-64-128"),
}


@dataclass(frozen=True)
class ModelDefaults:
    kernel: int = 3
    same_padding: bool = True
    loss: str = "bce"
    branch_kernels: tuple = ()


MODEL_DEFAULTS = {
    ModelName.TIMECNN: ModelDefaults(kernel=7, same_padding=False, loss="mse"),
    ModelName.MCNN: ModelDefaults(kernel=5, branch_kernels=(5, 7, 9)),
}


def model_defaults(name) -> ModelDefaults:
    return MODEL_DEFAULTS.get(ModelName.parse(name), ModelDefaults())


# ---------------------------------------------------------------------------
# parsing

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def at_end(self) -> bool:
        return self.peek() == ""

    def expect(self, char: str) -> None:
        if self.peek() != char:
            found = repr(self.peek()) if self.peek() else "end of input"
            raise ArchSyntaxError(f"expected {char!r}, found {found}", self.pos)
        self.pos += 1

    def word(self) -> tuple[str, int]:
        self.skip()
        start = self.pos
        match = re.compile(r"[A-Za-z][A-Za-z0-9_]*").match(self.text, self.pos)
        if not match:
            found = repr(self.peek()) if self.peek() else "end of input"
            raise ArchSyntaxError(f"expected a layer name, found {found}", start)
        self.pos = match.end()
        return match.group(0), start

    def integer(self) -> tuple[int, int]:
        self.skip()
        start = self.pos
        match = re.compile(r"[+-]?\d+").match(self.text, self.pos)
        if not match:
            raise ArchSyntaxError("expected an integer", start)
        self.pos = match.end()
        return int(match.group(0)), start

    def positive(self, what: str) -> int:
        value, at = self.integer()
        if value < 1:
            raise NonPositiveWidth(f"{what} must be positive, got {value}", at)
        return value

    def spec(self, stops: str = "") -> list[LayerSpec]:
        units = self.unit()
        while self.peek() == "-":
            self.pos += 1
            units.extend(self.unit())
        if not self.at_end() and self.peek() not in stops:
            raise ArchSyntaxError(f"unexpected {self.peek()!r}", self.pos)
        return units

    def unit(self) -> list[LayerSpec]:
        if self.peek() == "(":
            return self.concatenate()
        name, at = self.word()
        upper = name.upper()
        if upper == "RESBLOCK":
            return [self.resblock()]
        if upper in _BARE_KINDS:
            if upper == "FLATTEN":
                return [LayerSpec(LayerKind.FLATTEN)]
            return [LayerSpec(LayerKind.ACTIVATION, act=upper.lower())]
        kind = _SIZED_KINDS.get(upper)
        if kind is None:
            raise UnknownLayerKind(f"unknown layer kind {name!r}", at)
        self.expect("(")
        width = self.positive("width")
        kernel = None
        if self.peek() == ",":
            self.pos += 1
            kernel = self.positive("kernel")
        self.expect(")")
        return [LayerSpec(kind, width=width, kernel=kernel)]

    def resblock(self) -> LayerSpec:
        self.expect("(")
        body = self.spec(stops=")*")
        if self.peek() == ")":
            self.pos += 1
        elif self.peek() == "*":
            logger.warning("[arch] Resblock missing ')' before '*' at offset %d; closing it there", self.pos)
        else:
            raise ArchSyntaxError("unterminated Resblock", self.pos)
        repeat = 1
        if self.peek() == "*":
            self.pos += 1
            repeat = self.positive("repeat")
        return LayerSpec(LayerKind.RESBLOCK, repeat=repeat, branches=(tuple(body),))

    def concatenate(self) -> list[LayerSpec]:
        self.expect("(")
        name, at = self.word()
        if name.lower() != "concatenate":
            raise UnknownLayerKind(f"expected 'concatenate', found {name!r}", at)
        branches = [self.spec(stops=",)")]
        while self.peek() == ",":
            self.pos += 1
            branches.append(self.spec(stops=",)"))
        trailing: list[LayerSpec] = []
        if self.peek() == ")":
            self.pos += 1
        elif self.at_end():
            # unbalanced: the last branch is its first unit, the rest follows the join
            logger.warning("[arch] concatenate missing ')'; closing after the last branch's first unit")
            trailing = branches[-1][1:]
            branches[-1] = branches[-1][:1]
        else:
            raise ArchSyntaxError("unterminated concatenate", self.pos)
        return [LayerSpec(LayerKind.CONCAT, branches=tuple(tuple(b) for b in branches)), *trailing]


def parse_arch(text: str) -> list[LayerSpec]:
    parser = _Parser(text)
    if parser.at_end():
        raise ArchSyntaxError("empty architecture", 0)
    specs = parser.spec()
    if not parser.at_end():
        raise ArchSyntaxError(f"unexpected {parser.peek()!r}", parser.pos)
    return specs


def render(specs: Sequence[LayerSpec]) -> str:
    return "-".join(_render_unit(s) for s in specs)


def _render_unit(spec: LayerSpec) -> str:
    kind = spec.kind
    if kind is LayerKind.RESBLOCK:
        return f"Resblock({render(spec.branches[0])})*{spec.repeat}"
    if kind is LayerKind.CONCAT:
        return "(concatenate " + ", ".join(render(b) for b in spec.branches) + ")"
    if kind is LayerKind.FLATTEN:
        return "FLATTEN"
    if kind is LayerKind.ACTIVATION:
        return spec.act.upper()
    if spec.kernel is not None:
        return f"{kind.value}({spec.width},{spec.kernel})"
    return f"{kind.value}({spec.width})"


def expand_variant(name, text: str) -> str:
    """Expand a width list such as ``32-32-64`` into full notation for ``name``."""
    if "(" in text:
        return text
    name = ModelName.parse(name)
    try:
        widths = [int(w) for w in text.replace(" ", "").split("-")]
    except ValueError as e:
        raise ArchSyntaxError(f"bad width list {text!r}", 0) from e
    if any(w < 1 for w in widths):
        raise NonPositiveWidth(f"widths must be positive in {text!r}", 0)

    if name is ModelName.MLP:
        units = [f"FC({w})" for w in widths]
    elif name in (ModelName.CNN, ModelName.AUTOENCODER):
        units = [f"CONV({w})" for w in widths]
    elif name is ModelName.TIMECNN:
        units = [f"CONV({w})-AVGPOOL(3)" for w in widths]
    elif name in (ModelName.RNN, ModelName.GRU, ModelName.LSTM):
        units = [f"{name.value}({w})" for w in widths]
    elif name is ModelName.RESNET:
        # one projection conv per run of equal widths keeps every residual add shape-compatible
        units, i = [], 0
        while i < len(widths):
            j = i
            while j < len(widths) and widths[j] == widths[i]:
                j += 1
            w = widths[i]
            units.append(f"CONV({w})-Resblock(CONV({w})-CONV({w}))*{j - i}")
            i = j
    else:
        raise DataError(f"no width-list expansion for {name.value}")
    return "-".join(units + ["FC(1)"])


# ---------------------------------------------------------------------------
# lowering

def _scale(specs: Sequence[LayerSpec], factor: float, final: bool = True) -> list[LayerSpec]:
    out = []
    for i, spec in enumerate(specs):
        is_head = final and i == len(specs) - 1 and spec.kind is LayerKind.FC
        width = spec.width
        if width is not None and not is_head and spec.kind not in (
                LayerKind.AVGPOOL, LayerKind.MAXPOOL, LayerKind.DROPOUT):
            width = max(1, int(round(width * factor)))
        branches = tuple(tuple(_scale(b, factor, final=False)) for b in spec.branches)
        out.append(replace(spec, width=width, branches=branches))
    return out


def _with_dropout(specs: Sequence[LayerSpec], rate: float) -> list[LayerSpec]:
    percent = int(round(rate * 100))
    out = []
    for i, spec in enumerate(specs):
        out.append(spec)
        follower = specs[i + 1] if i + 1 < len(specs) else None
        if spec.kind is LayerKind.FC and i < len(specs) - 1 and (
                follower is None or follower.kind is not LayerKind.DROPOUT):
            out.append(LayerSpec(LayerKind.DROPOUT, width=percent))
    return out


def _consumes_sequence(specs: Sequence[LayerSpec], i: int) -> bool:
    """Whether the layer after position ``i`` wants a ``[channels, length]`` input."""
    j = i + 1
    while j < len(specs) and specs[j].kind in (LayerKind.DROPOUT, LayerKind.ACTIVATION):
        j += 1
    if j >= len(specs):
        return False
    nxt = specs[j]
    if nxt.kind in _SEQUENCE_CONSUMERS:
        return True
    if nxt.kind is LayerKind.FC:
        return _consumes_sequence(specs, j)
    return False


class _Lowering:
    def __init__(self, defaults: ModelDefaults, rng: np.random.Generator, dtype):
        self.defaults, self.rng, self.dtype = defaults, rng, dtype

    def chain(self, specs: Sequence[LayerSpec], shape: tuple, head: bool,
              branch_index: Optional[int] = None) -> list[Layer]:
        layers: list[Layer] = []
        for i, spec in enumerate(specs):
            is_head = head and i == len(specs) - 1
            for layer in self.unit(specs, i, spec, shape, is_head, branch_index):
                layers.append(layer)
                shape = layer.out_shape
        return layers

    def kernel(self, spec: LayerSpec, branch_index: Optional[int]) -> int:
        if spec.kernel is not None:
            return spec.kernel
        kernels = self.defaults.branch_kernels
        if branch_index is not None and branch_index < len(kernels):
            return kernels[branch_index]
        return self.defaults.kernel

    def unit(self, specs, i, spec: LayerSpec, shape, is_head, branch_index) -> list[Layer]:
        kind, rng, dtype = spec.kind, self.rng, self.dtype
        if kind is LayerKind.FC:
            if is_head:
                if spec.width != 1:
                    raise ShapeComposeError(f"final layer must be FC(1), got FC({spec.width})")
                pre = [Flatten(shape)] if len(shape) == 2 else []
                flat = pre[-1].out_shape if pre else shape
                return pre + [Dense(flat, 1, "sigmoid", rng, dtype)]
            if len(shape) == 2 and _consumes_sequence(specs, i):
                return [Dense(shape, spec.width, "relu", rng, dtype, positionwise=True)]
            pre = [Flatten(shape)] if len(shape) == 2 else []
            flat = pre[-1].out_shape if pre else shape
            return pre + [Dense(flat, spec.width, "relu", rng, dtype)]
        if kind is LayerKind.CONV:
            return [Conv(shape, spec.width, self.kernel(spec, branch_index), self.defaults.same_padding,
                         rng, dtype)]
        if kind is LayerKind.RESBLOCK:
            body = spec.branches[0]
            if len(body) != 2 or any(b.kind is not LayerKind.CONV for b in body) or body[0].width != body[1].width:
                raise ShapeComposeError(f"Resblock body must be two equal-width CONVs, got {render(body)}")
            blocks = []
            for _ in range(spec.repeat):
                block = ResidualBlock(shape, body[0].width, self.kernel(body[0], branch_index), rng, dtype)
                blocks.append(block)
                shape = block.out_shape
            return blocks
        if kind in _RECURRENT:
            return [Recurrent(shape, _RECURRENT[kind], spec.width, _consumes_sequence(specs, i), rng, dtype)]
        if kind in (LayerKind.AVGPOOL, LayerKind.MAXPOOL):
            return [Pool(shape, "avg" if kind is LayerKind.AVGPOOL else "max", spec.width)]
        if kind is LayerKind.FLATTEN:
            return [Flatten(shape)]
        if kind is LayerKind.DROPOUT:
            if spec.width >= 100:
                raise ShapeComposeError(f"DROPOUT({spec.width}) must be below 100 percent")
            return [Dropout(shape, spec.width / 100.0)]
        if kind is LayerKind.ACTIVATION:
            return [Activation(shape, spec.act)]
        if kind is LayerKind.CONCAT:
            branches = [self.chain(b, shape, head=False, branch_index=n) for n, b in enumerate(spec.branches)]
            return [Concat(shape, branches)]
        raise ShapeComposeError(f"cannot lower {kind}")


class ModelGraph:
    def __init__(self, name: ModelName, specs: Sequence[LayerSpec], layers: Sequence[Layer],
                 input_shape: tuple[int, int], seed: int, dtype=np.float32):
        self.name = name
        self.specs = tuple(specs)
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype)

    def __repr__(self):
        return f"<ModelGraph {self.name.value} {self.arch} input={self.input_shape} params={self.parameter_count()}>"

    @property
    def arch(self) -> str:
        return render(self.specs)

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, layer in enumerate(self.layers):
            named.extend((f"{i}.{layer.kind}.{name}", p) for name, p in layer.parameters())
        return named

    def parameter_count(self) -> int:
        return int(sum(p.size for _, p in self.parameters()))

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """``x[batch, length, channels]`` -> probabilities ``[batch, 1]``."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 3 or x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"{self.name.value} expects [batch, {self.input_shape[0]}, "
                                f"{self.input_shape[1]}], got {x.shape}")
        if rng is None:
            rng = np.random.default_rng(self.seed)
        h = transpose(x, (0, 2, 1))
        for layer in self.layers:
            h = layer.forward(h, training, rng)
        return h

    def predict_proba(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(X[i:i + batch_size]).data[:, 0] for i in range(0, len(X), batch_size)]
        return np.concatenate(out).astype(np.float64) if out else np.empty(0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            if state[name].shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint {state[name].shape} vs model {p.shape}")
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)

    def save_checkpoint(self, path) -> Path:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 blob in declared order)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        params = self.parameters()
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "name": self.name.value,
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "parameters": [{"name": name, "shape": list(p.shape)} for name, p in params],
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        with path.with_suffix(".bin").open("wb") as fh:
            for _, p in params:
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return path.with_suffix(".json")


def build_model(name, input_shape: tuple[int, int], seed: int = 0, overrides: Optional[str] = None,
                width_scale: float = 1.0, dropout: float = 0.0, dtype=np.float32) -> ModelGraph:
    """Instantiate a named model (or an override architecture) for ``input_shape = (length, channels)``."""
    name = ModelName.parse(name)
    length, channels = input_shape
    if length < 1 or channels < 1:
        raise ShapeComposeError(f"input shape must be positive, got {input_shape}")
    text = expand_variant(name, overrides) if overrides else DEFAULT_ARCHITECTURES[name]
    specs = parse_arch(text)
    if width_scale != 1.0:
        specs = _scale(specs, width_scale)
    if dropout:
        specs = _with_dropout(specs, dropout)
    if not specs or specs[-1].kind is not LayerKind.FC:
        raise ShapeComposeError(f"{render(specs)} must end with FC(1)")

    rng = np.random.default_rng(seed)
    lowering = _Lowering(model_defaults(name), rng, dtype)
    layers = lowering.chain(specs, (channels, length), head=True)
    model = ModelGraph(name, specs, layers, (length, channels), seed, dtype)
    logger.debug("[arch] built %r", model)
    return model


def load_checkpoint(path) -> ModelGraph:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    model = build_model(manifest["name"], tuple(manifest["input_shape"]), manifest["seed"],
                        overrides=manifest["arch"])
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    state, offset = {}, 0
    for entry in manifest["parameters"]:
        n = int(np.prod(entry["shape"]))
        state[entry["name"]] = blob[offset:offset + n].reshape(entry["shape"])
        offset += n
    if offset != blob.size:
        raise DataError(f"{path}: blob holds {blob.size} values, manifest declares {offset}")
    model.load_state_dict(state)
    return model
