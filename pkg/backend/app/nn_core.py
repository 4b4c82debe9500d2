"""
Minimal feed-forward network core: exact handwritten backpropagation, gradient
accumulation, an AdamW optimizer and the binary parameter checkpoint format.

Everything runs in float64. Inputs may be a single vector (n,) or a batch (b, n);
batched calls treat rows independently and sum parameter gradients over rows.
"""
import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, NumericalError, UsageError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "identity", "softmax")
_ACTIVATION_CODES = {name: code for code, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"HRFPARAM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")
_LAYER_HEADER = struct.Struct("<IIB")

_uids = itertools.count(1)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])


class ParamSet:
    """Parameters of a fully connected network: one (W, b, activation) per layer."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ConfigError("ParamSet needs at least one layer")
        checked: List[Layer] = []
        for k, layer in enumerate(layers):
            weight = np.array(layer.weight, dtype=np.float64, copy=True)
            bias = np.array(layer.bias, dtype=np.float64, copy=True)
            if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
                raise ConfigError(
                    f"Layer {k}: weight shape {weight.shape} and bias shape {bias.shape} are incompatible"
                )
            if layer.activation not in _ACTIVATION_CODES:
                raise ConfigError(f"Layer {k}: unknown activation '{layer.activation}', expected one of {ACTIVATIONS}")
            if layer.activation == "softmax" and k != len(layers) - 1:
                raise ConfigError("softmax is only allowed as the output activation")
            if checked and checked[-1].out_dim != weight.shape[1]:
                raise ConfigError(
                    f"Layer {k} expects {weight.shape[1]} inputs but layer {k - 1} produces {checked[-1].out_dim}"
                )
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise NumericalError(f"Layer {k} contains non-finite parameters")
            checked.append(Layer(weight, bias, layer.activation))
        self.layers: List[Layer] = checked
        self.uid = next(_uids)
        self.version = 0

    @classmethod
    def initialise(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "ParamSet":
        """Glorot-uniform weights, zero biases. `sizes` lists every width including input and output."""
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ConfigError(f"Need len(activations) == len(sizes) - 1, got sizes={list(sizes)} activations={list(activations)}")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> List[str]:
        return [layer.activation for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def copy(self) -> "ParamSet":
        return ParamSet([Layer(l.weight, l.bias, l.activation) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias)) for l in self.layers)

    def mark_updated(self) -> None:
        self.version += 1

    def same_shape(self, other: "ParamSet") -> bool:
        return self.sizes == other.sizes and self.activations == other.activations

    def __repr__(self) -> str:
        return f"ParamSet(sizes={self.sizes}, activations={self.activations}, params={self.num_params})"


@dataclass
class Tape:
    """Activation record of one forward call."""
    params_uid: int
    params_version: int
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    batched: bool


@dataclass
class GradientSet:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    count: int = 1

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "GradientSet":
        return cls(
            [np.zeros_like(l.weight) for l in params.layers],
            [np.zeros_like(l.bias) for l in params.layers],
            count=0,
        )

    def matches(self, params: ParamSet) -> bool:
        return len(self.weights) == len(params.layers) and all(
            gw.shape == l.weight.shape and gb.shape == l.bias.shape
            for gw, gb, l in zip(self.weights, self.biases, params.layers)
        )

    def add(self, other: "GradientSet") -> "GradientSet":
        """Accumulate `other` in place; the counter adds up."""
        if len(other.weights) != len(self.weights):
            raise UsageError("Cannot accumulate gradients of different networks")
        for k in range(len(self.weights)):
            self.weights[k] += other.weights[k]
            self.biases[k] += other.biases[k]
        self.count += other.count
        return self

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet([w * factor for w in self.weights], [b * factor for b in self.biases], self.count)

    def negated(self) -> "GradientSet":
        return self.scaled(-1.0)

    def mean(self) -> "GradientSet":
        if self.count <= 0:
            raise UsageError("Gradient accumulator is empty")
        averaged = self.scaled(1.0 / self.count)
        averaged.count = 1
        return averaged

    def global_norm(self) -> float:
        total = sum(float(np.sum(w * w)) for w in self.weights) + sum(float(np.sum(b * b)) for b in self.biases)
        return float(np.sqrt(total))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights) and all(np.all(np.isfinite(b)) for b in self.biases)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activation_backward(a: np.ndarray, grad: np.ndarray, activation: str) -> np.ndarray:
    """Map d loss / d activation-output to d loss / d pre-activation, using the stored output."""
    if activation == "tanh":
        return grad * (1.0 - a * a)
    if activation == "relu":
        return grad * (a > 0.0)
    if activation == "identity":
        return grad
    return a * (grad - np.sum(grad * a, axis=1, keepdims=True))


def forward(params: ParamSet, x: Union[np.ndarray, Sequence[float]]) -> Tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x.reshape(1, -1)
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ConfigError(f"Input of shape {x.shape} does not match network input dimension {params.input_dim}")

    inputs: List[np.ndarray] = []
    outputs: List[np.ndarray] = []
    for layer in params.layers:
        inputs.append(h)
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        outputs.append(h)
    if not np.all(np.isfinite(h)):
        raise NumericalError("Network produced non-finite output")

    tape = Tape(params.uid, params.version, inputs, outputs, batched)
    return (h if batched else h[0]), tape


def backward(params: ParamSet, tape: Tape, output_grad: Union[np.ndarray, Sequence[float]]) -> GradientSet:
    if tape.params_uid != params.uid or tape.params_version != params.version:
        raise UsageError(
            f"Tape was recorded for params uid={tape.params_uid} v{tape.params_version}, "
            f"got uid={params.uid} v{params.version}"
        )
    grad = np.asarray(output_grad, dtype=np.float64)
    grad = grad if tape.batched else grad.reshape(1, -1)
    if grad.shape != tape.outputs[-1].shape:
        raise UsageError(f"Output gradient shape {grad.shape} does not match recorded output {tape.outputs[-1].shape}")

    weights: List[np.ndarray] = [np.empty(0)] * len(params.layers)
    biases: List[np.ndarray] = [np.empty(0)] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        dz = _activation_backward(tape.outputs[k], grad, layer.activation)
        weights[k] = dz.T @ tape.inputs[k]
        biases[k] = dz.sum(axis=0)
        if k:
            grad = dz @ layer.weight
    return GradientSet(weights, biases, count=1)


@dataclass
class OptimizerState:
    """AdamW with decoupled weight decay, global-norm clipping and optional linear warm-up."""
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    clip_norm: Optional[float] = 4.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    step: int = 0
    m_weights: List[np.ndarray] = field(default_factory=list)
    m_biases: List[np.ndarray] = field(default_factory=list)
    v_weights: List[np.ndarray] = field(default_factory=list)
    v_biases: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.m_weights = [np.zeros_like(l.weight) for l in params.layers]
        state.m_biases = [np.zeros_like(l.bias) for l in params.layers]
        state.v_weights = [np.zeros_like(l.weight) for l in params.layers]
        state.v_biases = [np.zeros_like(l.bias) for l in params.layers]
        return state

    def current_learning_rate(self) -> float:
        if self.warmup_steps > 0:
            return self.learning_rate * min(1.0, (self.step + 1) / self.warmup_steps)
        return self.learning_rate


def clip_by_global_norm(grads: GradientSet, max_norm: Optional[float]) -> Tuple[GradientSet, float]:
    norm = grads.global_norm()
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        clipped = grads.scaled(max_norm / norm)
        clipped.count = grads.count
        return clipped, norm
    return grads, norm


def optimizer_step(state: OptimizerState, params: ParamSet, grads: GradientSet) -> ParamSet:
    """
    One AdamW update of `params` (in place, returned for convenience). `grads` is the
    descent direction of a loss; it is averaged by its counter and clipped first.
    """
    if not grads.matches(params):
        raise UsageError("Gradient set is not shape-congruent with the parameters")
    if not state.m_weights:
        fresh = OptimizerState.for_params(params)
        state.m_weights, state.m_biases = fresh.m_weights, fresh.m_biases
        state.v_weights, state.v_biases = fresh.v_weights, fresh.v_biases

    averaged = grads.mean()
    if not averaged.is_finite():
        raise NumericalError(f"Non-finite gradient at optimizer step {state.step + 1}")
    averaged, _ = clip_by_global_norm(averaged, state.clip_norm)

    lr = state.current_learning_rate()
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step

    for k, layer in enumerate(params.layers):
        for param, g, m, v in (
            (layer.weight, averaged.weights[k], state.m_weights[k], state.v_weights[k]),
            (layer.bias, averaged.biases[k], state.m_biases[k], state.v_biases[k]),
        ):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
            param -= lr * (update + state.weight_decay * param)

    if not params.is_finite():
        raise NumericalError(f"Parameters became non-finite at optimizer step {state.step}")
    params.mark_updated()
    return params


# Checkpoint format: magic, version, layer count, then per layer (in, out, activation code),
# then every layer's weights (row-major) followed by its bias, all little-endian float64.

def params_to_bytes(params: ParamSet) -> bytes:
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params.layers))]
    for layer in params.layers:
        chunks.append(_LAYER_HEADER.pack(layer.in_dim, layer.out_dim, _ACTIVATION_CODES[layer.activation]))
    for layer in params.layers:
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(chunks)


def params_from_bytes(blob: bytes) -> ParamSet:
    if len(blob) < _HEADER.size:
        raise ConfigError("Checkpoint is truncated")
    magic, version, n_layers = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"Not a parameter checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"Unsupported checkpoint version {version}")
    offset = _HEADER.size
    dims = []
    for k in range(n_layers):
        try:
            in_dim, out_dim, code = _LAYER_HEADER.unpack_from(blob, offset)
        except struct.error as e:
            raise ConfigError(f"Checkpoint is truncated in the header of layer {k}") from e
        offset += _LAYER_HEADER.size
        if code >= len(ACTIVATIONS):
            raise ConfigError(f"Unknown activation code {code} in checkpoint")
        dims.append((in_dim, out_dim, ACTIVATIONS[code]))
    expected = offset + 8 * sum(o * i + o for i, o, _ in dims)
    if len(blob) != expected:
        raise ConfigError(f"Checkpoint size {len(blob)} does not match header (expected {expected})")
    layers = []
    for in_dim, out_dim, act in dims:
        weight = np.frombuffer(blob, dtype="<f8", count=out_dim * in_dim, offset=offset).reshape(out_dim, in_dim)
        offset += 8 * out_dim * in_dim
        bias = np.frombuffer(blob, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        layers.append(Layer(weight.astype(np.float64), bias.astype(np.float64), act))
    return ParamSet(layers)


def save_params(params: ParamSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(params_to_bytes(params))
    tmp.replace(path)
    logger.debug("Saved %r to %s", params, path)
    return path


def load_params(path: Union[str, Path]) -> ParamSet:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    return params_from_bytes(path.read_bytes())
