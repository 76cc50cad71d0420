"""The 18-layer 1D CNN that maps a single-channel EEG segment to grade
probabilities.

The canonical architecture (``build_network``) is four conv-ReLU-pool
blocks with one batch-norm after the first pooling stage, a global
average over the remaining temporal extent, and a two-layer classifier
head ending in softmax over the four HIE grades. Pooling uses floor
semantics and the global average absorbs whatever length remains, so the
same family accepts any segment length down to the pooling chain's
minimum of 1280 samples.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import (
    BatchNormState,
    ConvFilterBank,
    INFER,
    TRAIN,
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    conv_output_length,
    fully_connected,
    fully_connected_backward,
    global_average,
    global_average_backward,
    pool1d,
    pool1d_backward,
    pool_output_length,
    relu,
    relu_backward,
    softmax,
)

N_GRADES = 4

# product of the pooling strides (4*4*4*4*5); shorter inputs starve the chain
MIN_SEGMENT_SAMPLES = 1280

CHECKPOINT_MAGIC = b"HIEN"
CHECKPOINT_VERSION = 1


def validate_probabilities(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != N_GRADES:
        raise ValueError(f"grade probabilities must have {N_GRADES} entries, "
                         f"got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("grade probabilities must be nonnegative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("grade probabilities must sum to 1")
    return p


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor: kind plus whichever sizes that kind uses."""

    kind: str  # conv | relu | maxpool | avgpool | batchnorm | global_avg | fc | softmax
    taps: int = 0
    out_channels: int = 0
    window: int = 0
    stride: int = 0
    features: int = 0
    in_features: int = 0
    out_features: int = 0


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list for a fixed input segment length."""

    segment_samples: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        self.activation_shapes()  # walking the shapes validates the chain

    def activation_shapes(self) -> list[tuple[int, int]]:
        """(length, channels) after each layer, starting from the input."""
        length, ch = self.segment_samples, 1
        shapes = [(length, ch)]
        for layer in self.layers:
            if layer.kind == "conv":
                length = conv_output_length(length, layer.taps, kernels.PAD_SAME)
                ch = layer.out_channels
            elif layer.kind in ("maxpool", "avgpool"):
                length = pool_output_length(length, layer.window, layer.stride)
            elif layer.kind == "batchnorm":
                if layer.features != ch:
                    raise ValueError(f"batch-norm expects {layer.features} "
                                     f"feature maps but gets {ch}")
            elif layer.kind == "global_avg":
                length = 1
            elif layer.kind == "fc":
                if layer.in_features != length * ch:
                    raise ValueError(f"fc layer expects {layer.in_features} "
                                     f"inputs but gets {length * ch}")
                length, ch = 1, layer.out_features
            elif layer.kind in ("relu", "softmax"):
                pass
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            shapes.append((length, ch))
        return shapes


def build_network(segment_samples: int) -> ModelSpec:
    """The standard grading network for a given input segment length."""
    if segment_samples < MIN_SEGMENT_SAMPLES:
        raise ValueError(
            f"segment_samples must be >= {MIN_SEGMENT_SAMPLES} so the "
            f"pooling chain (strides 4,4,4,4,5) keeps at least one sample; "
            f"got {segment_samples}")
    layers = (
        LayerSpec("conv", taps=64, out_channels=10),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=4, stride=4),
        LayerSpec("batchnorm", features=10),
        LayerSpec("conv", taps=32, out_channels=20),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=4, stride=4),
        LayerSpec("conv", taps=16, out_channels=20),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=4, stride=4),
        LayerSpec("conv", taps=8, out_channels=20),
        LayerSpec("relu"),
        LayerSpec("avgpool", window=4, stride=4),
        LayerSpec("maxpool", window=5, stride=5),
        LayerSpec("global_avg"),
        LayerSpec("fc", in_features=20, out_features=20),
        LayerSpec("fc", in_features=20, out_features=4),
        LayerSpec("softmax"),
    )
    return ModelSpec(segment_samples=segment_samples, layers=layers)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class FcParams:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class ModelParams:
    """Trainable state for one ModelSpec, plus provenance metadata."""

    spec: ModelSpec
    entries: list  # per layer: ConvFilterBank | BatchNormState | FcParams | None
    seed: int = 0
    epochs_trained: int = 0

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        """Named trainable arrays in a stable order (running stats excluded)."""
        out = []
        for i, entry in enumerate(self.entries):
            if isinstance(entry, ConvFilterBank):
                out.append((f"layer{i}.conv.weights", entry.weights))
                out.append((f"layer{i}.conv.bias", entry.bias))
            elif isinstance(entry, BatchNormState):
                out.append((f"layer{i}.bnorm.scale", entry.scale))
                out.append((f"layer{i}.bnorm.offset", entry.offset))
            elif isinstance(entry, FcParams):
                out.append((f"layer{i}.fc.weights", entry.weights))
                out.append((f"layer{i}.fc.bias", entry.bias))
        return out

    def copy(self) -> "ModelParams":
        entries = []
        for entry in self.entries:
            if isinstance(entry, ConvFilterBank):
                entries.append(ConvFilterBank(entry.weights.copy(), entry.bias.copy()))
            elif isinstance(entry, BatchNormState):
                entries.append(BatchNormState(
                    entry.scale.copy(), entry.offset.copy(),
                    entry.running_mean.copy(), entry.running_var.copy(),
                    entry.epsilon, entry.momentum, entry.batches_tracked))
            elif isinstance(entry, FcParams):
                entries.append(FcParams(entry.weights.copy(), entry.bias.copy()))
            else:
                entries.append(None)
        return ModelParams(self.spec, entries, self.seed, self.epochs_trained)


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """He-style initialization: N(0, 2/fan_in) weights, zero biases,
    identity batch norm. Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    entries = []
    shapes = spec.activation_shapes()
    for i, layer in enumerate(spec.layers):
        in_ch = shapes[i][1]
        if layer.kind == "conv":
            fan_in = layer.taps * in_ch
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(layer.taps, in_ch, layer.out_channels))
            entries.append(ConvFilterBank(w, np.zeros(layer.out_channels)))
        elif layer.kind == "batchnorm":
            entries.append(BatchNormState.identity(layer.features))
        elif layer.kind == "fc":
            w = rng.normal(0.0, np.sqrt(2.0 / layer.in_features),
                           size=(layer.in_features, layer.out_features))
            entries.append(FcParams(w, np.zeros(layer.out_features)))
        else:
            entries.append(None)
    return ModelParams(spec=spec, entries=entries, seed=seed)


@dataclass(frozen=True)
class LayerParamCount:
    layer_index: int
    kind: str
    weights: int  # offsets for batch norm
    biases: int   # scales for batch norm


@dataclass(frozen=True)
class ParameterCounts:
    per_layer: tuple[LayerParamCount, ...]

    @property
    def total(self) -> int:
        return sum(c.weights + c.biases for c in self.per_layer)

    def pairs(self) -> list[tuple[int, int]]:
        return [(c.weights, c.biases) for c in self.per_layer]


def count_parameters(params: ModelParams) -> ParameterCounts:
    """Exact trainable counts per parametric layer, in layer order."""
    counts = []
    for i, entry in enumerate(params.entries):
        if isinstance(entry, ConvFilterBank):
            counts.append(LayerParamCount(i, "conv", entry.weights.size, entry.bias.size))
        elif isinstance(entry, BatchNormState):
            counts.append(LayerParamCount(i, "batchnorm", entry.offset.size, entry.scale.size))
        elif isinstance(entry, FcParams):
            counts.append(LayerParamCount(i, "fc", entry.weights.size, entry.bias.size))
    return ParameterCounts(tuple(counts))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward(params: ModelParams, segment: np.ndarray, mode: str = INFER,
            return_tape: bool = False):
    """Run a segment (L, 1) or a batch (B, L, 1) through the network.

    Returns grade probabilities (4,) or (B, 4). With ``return_tape=True``
    also returns the per-layer input cache that :func:`backward` consumes.
    Train mode uses batch statistics in the batch-norm layer and updates
    its running estimates.
    """
    x = np.asarray(segment, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 1:
        raise ValueError(f"segment must be (length, 1) or (batch, length, 1), "
                         f"got shape {np.shape(segment)}")
    if x.shape[1] != params.spec.segment_samples:
        raise ValueError(f"segment length {x.shape[1]} does not match the "
                         f"model's {params.spec.segment_samples} samples")

    tape = []
    for i, (layer, entry) in enumerate(zip(params.spec.layers, params.entries)):
        if layer.kind == "fc" and x.ndim == 3:
            x = x.reshape(x.shape[0], -1)
        tape.append(x if return_tape else None)
        if layer.kind == "conv":
            x = conv1d_forward(x, entry)
        elif layer.kind == "relu":
            # in place: interior buffers are owned here, and the sign
            # pattern the backward pass reads is preserved
            x = relu(x, inplace=i > 0)
        elif layer.kind == "maxpool":
            x = pool1d(x, layer.window, layer.stride, "max")
        elif layer.kind == "avgpool":
            x = pool1d(x, layer.window, layer.stride, "average")
        elif layer.kind == "batchnorm":
            x = batchnorm_forward(x, entry, mode)
        elif layer.kind == "global_avg":
            x = global_average(x)
        elif layer.kind == "fc":
            x = fully_connected(x, entry.weights, entry.bias)
        elif layer.kind == "softmax":
            x = softmax(x)
    probs = x[0] if squeeze else x
    if return_tape:
        return probs, tape
    return probs


def backward(params: ModelParams, tape: list, logits_grad: np.ndarray,
             mode: str = TRAIN, need_input_grad: bool = False):
    """Backpropagate a gradient w.r.t. the logits through the network.

    ``logits_grad`` is the combined softmax-plus-loss gradient (for
    cross-entropy: probabilities minus one-hot), so the softmax layer is
    skipped here. Returns ``(param_grads, input_grad)`` where
    ``param_grads`` is a dict matching :meth:`ModelParams.trainable`
    names; ``input_grad`` is None unless requested.
    """
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(logits_grad, dtype=np.float64)
    own_g = False  # becomes True once g is a buffer this walk created
    n_layers = len(params.spec.layers)
    for i in range(n_layers - 1, -1, -1):
        layer = params.spec.layers[i]
        entry = params.entries[i]
        x_in = tape[i]
        first = i == 0
        if layer.kind == "softmax":
            continue  # folded into logits_grad by the caller
        if layer.kind == "conv":
            gx, gw, gb = conv1d_backward(
                x_in, entry, g, need_input_grad=(not first) or need_input_grad)
            grads[f"layer{i}.conv.weights"] = gw
            grads[f"layer{i}.conv.bias"] = gb
            g = gx
            own_g = True
        elif layer.kind == "relu":
            g = relu_backward(x_in, g, inplace=own_g)
        elif layer.kind == "maxpool":
            g = pool1d_backward(x_in, layer.window, layer.stride, "max", g)
            own_g = True
        elif layer.kind == "avgpool":
            g = pool1d_backward(x_in, layer.window, layer.stride, "average", g)
            own_g = True
        elif layer.kind == "batchnorm":
            g, gs, go = batchnorm_backward(x_in, entry, g, mode)
            grads[f"layer{i}.bnorm.scale"] = gs
            grads[f"layer{i}.bnorm.offset"] = go
            own_g = True
        elif layer.kind == "global_avg":
            if g.ndim == 2:  # classifier head flattened (B, C)
                g = g[:, None, :]
            g = global_average_backward(x_in, g)
            own_g = True
        elif layer.kind == "fc":
            g, gw, gb = fully_connected_backward(x_in, entry.weights, g)
            grads[f"layer{i}.fc.weights"] = gw
            grads[f"layer{i}.fc.bias"] = gb
            own_g = True
        if first:
            break
    input_grad = g if need_input_grad else None
    return grads, input_grad


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   magic "HIEN" | u16 version=1 | u32 segment_samples | u64 seed |
#   u32 epochs | parameter blocks in layer order.
# Each block is a sequence of arrays, one array = u32 count + count f64:
#   conv      -> weights (row-major), bias
#   batchnorm -> scale, offset, running_mean, running_var, [batches_tracked]
#   fc        -> weights (row-major), bias

def _write_array(buf: io.BufferedIOBase, a: np.ndarray) -> None:
    flat = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
    buf.write(struct.pack("<I", flat.size))
    buf.write(flat.tobytes())


def _read_array(buf: io.BufferedIOBase, expect: int, what: str) -> np.ndarray:
    raw = buf.read(4)
    if len(raw) < 4:
        raise ValueError(f"truncated checkpoint: missing count for {what}")
    (count,) = struct.unpack("<I", raw)
    if count != expect:
        raise ValueError(f"checkpoint {what} holds {count} values, "
                         f"expected {expect}")
    data = buf.read(8 * count)
    if len(data) < 8 * count:
        raise ValueError(f"truncated checkpoint: incomplete values for {what}")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def save_checkpoint(params: ModelParams, path) -> None:
    """Serialize parameters (and batch-norm running stats) to ``path``."""
    if params.spec != build_network(params.spec.segment_samples):
        raise ValueError("only the standard architecture can be serialized "
                         "in checkpoint format v1")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HIQI", CHECKPOINT_VERSION,
                             params.spec.segment_samples,
                             params.seed, params.epochs_trained))
        for entry in params.entries:
            if isinstance(entry, ConvFilterBank):
                _write_array(fh, entry.weights)
                _write_array(fh, entry.bias)
            elif isinstance(entry, BatchNormState):
                _write_array(fh, entry.scale)
                _write_array(fh, entry.offset)
                _write_array(fh, entry.running_mean)
                _write_array(fh, entry.running_var)
                _write_array(fh, np.array([float(entry.batches_tracked)]))
            elif isinstance(entry, FcParams):
                _write_array(fh, entry.weights)
                _write_array(fh, entry.bias)


def load_checkpoint(path) -> ModelParams:
    """Load a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r} "
                             f"(expected {CHECKPOINT_MAGIC!r})")
        header = fh.read(struct.calcsize("<HIQI"))
        if len(header) < struct.calcsize("<HIQI"):
            raise ValueError("truncated checkpoint: incomplete header")
        version, segment_samples, seed, epochs = struct.unpack("<HIQI", header)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} "
                             f"(expected {CHECKPOINT_VERSION})")
        spec = build_network(segment_samples)
        params = init_params(spec, seed=0)
        for i, (layer, entry) in enumerate(zip(spec.layers, params.entries)):
            what = f"layer {i} ({layer.kind})"
            if isinstance(entry, ConvFilterBank):
                entry.weights[...] = _read_array(
                    fh, entry.weights.size, what + " weights"
                ).reshape(entry.weights.shape)
                entry.bias[...] = _read_array(fh, entry.bias.size, what + " bias")
            elif isinstance(entry, BatchNormState):
                entry.scale[...] = _read_array(fh, entry.scale.size, what + " scale")
                entry.offset[...] = _read_array(fh, entry.offset.size, what + " offset")
                entry.running_mean = _read_array(
                    fh, entry.running_mean.size, what + " running mean")
                entry.running_var = _read_array(
                    fh, entry.running_var.size, what + " running var")
                entry.batches_tracked = int(
                    _read_array(fh, 1, what + " batch counter")[0])
            elif isinstance(entry, FcParams):
                entry.weights[...] = _read_array(
                    fh, entry.weights.size, what + " weights"
                ).reshape(entry.weights.shape)
                entry.bias[...] = _read_array(fh, entry.bias.size, what + " bias")
        trailing = fh.read(1)
        if trailing:
            raise ValueError("corrupt checkpoint: trailing bytes after "
                             "parameter blocks")
        params.seed = seed
        params.epochs_trained = epochs
        return params
