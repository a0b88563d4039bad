"""Softmax regression and ReLU MLP classifiers with analytic per-example gradients.

Parameters live in one flat float64 vector. For every dense layer the weight
matrix (fan_in x fan_out, row-major) is stored first, followed by its bias.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError

PROB_FLOOR = 1e-12
DEFAULT_HIDDEN = (200, 200)


class Architecture(str, enum.Enum):
    SOFTMAX = "SoftmaxRegression"
    MLP = "MLP"


@dataclass(frozen=True)
class ModelSpec:
    architecture: Architecture
    input_dim: int
    num_classes: int
    hidden_sizes: Tuple[int, ...] = ()

    def __post_init__(self):
        arch = Architecture(self.architecture)
        object.__setattr__(self, "architecture", arch)
        hidden = tuple(int(h) for h in self.hidden_sizes)
        if arch is Architecture.MLP and not hidden:
            hidden = DEFAULT_HIDDEN
        if arch is Architecture.SOFTMAX and hidden:
            raise ConfigError("SoftmaxRegression takes no hidden_sizes")
        if any(h <= 0 for h in hidden):
            raise ConfigError(f"hidden sizes must be positive, got {hidden}")
        if self.input_dim <= 0:
            raise ConfigError("input_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        object.__setattr__(self, "hidden_sizes", hidden)

    @classmethod
    def softmax(cls, input_dim: int, num_classes: int) -> "ModelSpec":
        return cls(Architecture.SOFTMAX, input_dim, num_classes)

    @classmethod
    def mlp(cls, input_dim: int, num_classes: int,
            hidden_sizes: Sequence[int] = DEFAULT_HIDDEN) -> "ModelSpec":
        return cls(Architecture.MLP, input_dim, num_classes, tuple(hidden_sizes))

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden_sizes, self.num_classes)

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    @property
    def num_bytes(self) -> int:
        """Serialized size at double precision."""
        return 8 * self.num_params

    def describe(self) -> str:
        if self.architecture is Architecture.MLP:
            return "MLP(" + ",".join(str(h) for h in self.hidden_sizes) + ")"
        return self.architecture.value


@dataclass
class ParamVector:
    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.spec.num_params:
            raise ShapeError(
                f"{self.spec.describe()} needs {self.spec.num_params} parameters, "
                f"got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("parameter vector contains NaN or Inf")

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return _unflatten(self.spec, self.values)

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.spec)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)


def _unflatten(spec: ModelSpec, values: np.ndarray):
    sizes = spec.layer_sizes
    out, pos = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = values[pos:pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    sizes = spec.layer_sizes
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return ParamVector(np.concatenate(chunks), spec)


def zeros(spec: ModelSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.num_params), spec)


def _check_inputs(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected inputs of shape (n, {spec.input_dim}), got {x.shape}")
    return x


def _forward_cache(params: ParamVector, x: np.ndarray):
    """Returns the layer inputs (post-activation) and the final logits."""
    layers = params.layers()
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return acts, h


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logits(params: ParamVector, inputs) -> np.ndarray:
    x = _check_inputs(params.spec, inputs)
    return _forward_cache(params, x)[1]


def forward(params: ParamVector, inputs) -> np.ndarray:
    """Class probabilities, one row per input."""
    return softmax(logits(params, inputs))


def predict(params: ParamVector, inputs) -> np.ndarray:
    # np.argmax breaks ties toward the lowest index
    return np.argmax(logits(params, inputs), axis=1)


def ce_loss(predicted, label: int) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def kl_loss(p, q) -> float:
    """KL(p || q) with both arguments floored inside the logarithms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"probability vectors differ in shape: {p.shape} vs {q.shape}")
    logs = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    terms = np.where(p > 0, p * logs, 0.0)
    return max(float(terms.sum()), 0.0)


def _check_mix(mix: float, peer_probs) -> None:
    if peer_probs is None:
        if mix != 0.0:
            raise ConfigError("mix weight given without peer outputs")
    elif not 0.0 < mix < 1.0:
        raise ConfigError(f"mix weight must lie in (0, 1), got {mix}")


def dml_losses(params: ParamVector, inputs, labels, peer_probs: Optional[np.ndarray] = None,
               mix: float = 0.0) -> np.ndarray:
    """Per-example (1-mix)*CE[model(x)||y] + mix*KL[model(x)||peer(x)].

    The model's own log-probabilities come from a log-softmax; only the peer's
    probabilities are floored. With ``peer_probs=None`` this is plain CE.
    """
    _check_mix(mix, peer_probs)
    x = _check_inputs(params.spec, inputs)
    y = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(_forward_cache(params, x)[1])
    ce = -logp[np.arange(len(y)), y]
    if peer_probs is None:
        return ce
    logq = np.log(np.maximum(np.asarray(peer_probs, dtype=np.float64), PROB_FLOOR))
    kl = np.sum(np.exp(logp) * (logp - logq), axis=1)
    return (1.0 - mix) * ce + mix * kl


def dml_loss(params, inputs, labels, peer_probs=None, mix=0.0) -> float:
    return float(np.mean(dml_losses(params, inputs, labels, peer_probs, mix)))


def _output_deltas(z: np.ndarray, y: np.ndarray, peer_probs, mix: float) -> np.ndarray:
    logp = log_softmax(z)
    p = np.exp(logp)
    delta = p.copy()
    delta[np.arange(len(y)), y] -= 1.0
    if peer_probs is None:
        return delta
    logq = np.log(np.maximum(np.asarray(peer_probs, dtype=np.float64), PROB_FLOOR))
    ratio = logp - logq
    kl_grad = p * (ratio - np.sum(p * ratio, axis=1, keepdims=True))
    return (1.0 - mix) * delta + mix * kl_grad


def _backprop(params: ParamVector, inputs, labels, peer_probs, mix):
    """Yields (layer_input, delta) pairs from the output layer backwards."""
    _check_mix(mix, peer_probs)
    x = _check_inputs(params.spec, inputs)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != len(x):
        raise ShapeError(f"{len(x)} inputs but {len(y)} labels")
    if peer_probs is not None and np.shape(peer_probs) != (len(x), params.spec.num_classes):
        raise ShapeError(f"peer outputs have shape {np.shape(peer_probs)}")
    layers = params.layers()
    acts, z = _forward_cache(params, x)
    delta = _output_deltas(z, y, peer_probs, mix)
    out = []
    for i in range(len(layers) - 1, -1, -1):
        out.append((acts[i], delta))
        if i > 0:
            delta = (delta @ layers[i][0].T) * (acts[i] > 0)
    return out[::-1]


def per_example_gradients(params: ParamVector, inputs, labels,
                          peer_probs: Optional[np.ndarray] = None,
                          mix: float = 0.0) -> np.ndarray:
    """Gradient of each example's DML loss, shape (batch, num_params).

    Peer outputs enter as constants: the routine only ever sees the peer's
    probabilities, never its parameters.
    """
    chunks = []
    for a, d in _backprop(params, inputs, labels, peer_probs, mix):
        n = len(a)
        chunks.append((a[:, :, None] * d[:, None, :]).reshape(n, -1))
        chunks.append(d)
    return np.concatenate(chunks, axis=1)


def batch_gradient(params: ParamVector, inputs, labels,
                   peer_probs: Optional[np.ndarray] = None,
                   mix: float = 0.0) -> np.ndarray:
    """Gradient of the batch-mean loss, without materializing per-example rows."""
    chunks = []
    for a, d in _backprop(params, inputs, labels, peer_probs, mix):
        d = d / len(a)
        chunks.append((a.T @ d).reshape(-1))
        chunks.append(d.sum(axis=0))
    return np.concatenate(chunks)


def clipped_gradient_sum(params: ParamVector, inputs, labels, clip: float,
                         peer_probs: Optional[np.ndarray] = None,
                         mix: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Sum over the batch of per-example gradients clipped to L2 norm ``clip``.

    Per-example norms use ||a (x) d||^2 = ||a||^2 ||d||^2 for each dense
    layer, so the (batch, num_params) matrix is never formed. Returns the
    clipped sum and the unclipped per-example norms.
    """
    pairs = _backprop(params, inputs, labels, peer_probs, mix)
    sq = np.zeros(len(pairs[0][0]))
    for a, d in pairs:
        sq += (np.sum(a * a, axis=1) + 1.0) * np.sum(d * d, axis=1)
    norms = np.sqrt(sq)
    scale = 1.0 / np.maximum(1.0, norms / clip)
    chunks = []
    for a, d in pairs:
        d = d * scale[:, None]
        chunks.append((a.T @ d).reshape(-1))
        chunks.append(d.sum(axis=0))
    return np.concatenate(chunks), norms


@dataclass(frozen=True)
class DmlConfig:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"dml.{name} must lie in (0, 1), got {v}")
