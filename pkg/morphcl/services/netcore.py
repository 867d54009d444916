"""Feedforward networks over float64 numpy arrays: forward, losses, exact backprop."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import orjson
from scipy.special import expit, log_softmax, softmax

from morphcl.exceptions import NonFiniteError, ShapeMismatchError
from morphcl.schemas import ActivationKind, Architecture, LayerDocument, LossKind, NetworkDocument

logger = logging.getLogger(__name__)

# Free parameter `a` of the inverse-square-root units
ISR_A = 1.0


# --- Matrix helpers ---
def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array"""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


# --- Parameter containers ---
@dataclass(frozen=True)
class ParamSet:
    """Flat, ordered tuple of parameter-shaped arrays (W0, b0, W1, b1, ...)"""

    tensors: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.tensors[i]

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self.check_compatible(other)
        return ParamSet(tuple(a + b for a, b in zip(self.tensors, other.tensors)))

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self.check_compatible(other)
        return ParamSet(tuple(a - b for a, b in zip(self.tensors, other.tensors)))

    def scale(self, c: float) -> "ParamSet":
        return ParamSet(tuple(c * a for a in self.tensors))

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet(tuple(fn(a) for a in self.tensors))

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.tensors)))

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.tensors])

    def zeros_like(self) -> "ParamSet":
        return ParamSet(tuple(np.zeros_like(a) for a in self.tensors))

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.tensors]

    def check_compatible(self, other: "ParamSet") -> None:
        if self.shapes != other.shapes:
            raise ShapeMismatchError(f"parameter shapes differ: {self.shapes} vs {other.shapes}")

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.tensors)


Gradients = ParamSet


# --- Activations ---
def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0.0).astype(np.float64)


def _elu(z):
    return np.where(z >= 0.0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z):
    return np.where(z >= 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def _softsign(z):
    return z / (1.0 + np.abs(z))


def _softsign_grad(z):
    return 1.0 / (1.0 + np.abs(z)) ** 2


def _isru(z):
    return z / np.sqrt(1.0 + ISR_A * z * z)


def _isru_grad(z):
    return (1.0 + ISR_A * z * z) ** -1.5


def _isrlu(z):
    return np.where(z >= 0.0, z, _isru(z))


def _isrlu_grad(z):
    return np.where(z >= 0.0, 1.0, _isru_grad(z))


def _sigmoid_grad(z):
    s = expit(z)
    return s * (1.0 - s)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


_ACTIVATIONS: dict[ActivationKind, tuple[Callable, Callable]] = {
    ActivationKind.RELU: (_relu, _relu_grad),
    ActivationKind.ELU: (_elu, _elu_grad),
    ActivationKind.SOFTSIGN: (_softsign, _softsign_grad),
    ActivationKind.ISRLU: (_isrlu, _isrlu_grad),
    ActivationKind.ISRU: (_isru, _isru_grad),
    ActivationKind.SIGMOID: (expit, _sigmoid_grad),
    ActivationKind.TANH: (np.tanh, _tanh_grad),
    ActivationKind.IDENTITY: (lambda z: z, np.ones_like),
}


def activate(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    return _ACTIVATIONS[kind][0](z)


def activation_grad(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    return _ACTIVATIONS[kind][1](z)


# --- Network ---
@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: ActivationKind


@dataclass(frozen=True)
class Network:
    arch: Architecture
    activation: ActivationKind
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if len(self.layers) != self.arch.depth:
            raise ShapeMismatchError(f"architecture {self.arch} needs {self.arch.depth} layers, got {len(self.layers)}")
        for i, ((out_w, in_w), layer) in enumerate(zip(self.arch.layer_dims(), self.layers)):
            if layer.weight.shape != (out_w, in_w):
                raise ShapeMismatchError(
                    f"layer {i}: weight shape {layer.weight.shape} does not match architecture ({out_w}, {in_w})"
                )
            if layer.bias.shape != (out_w,):
                raise ShapeMismatchError(f"layer {i}: bias shape {layer.bias.shape} != ({out_w},)")

    @classmethod
    def from_arrays(
        cls,
        arch: Architecture,
        activation: ActivationKind,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
    ) -> "Network":
        n = len(weights)
        layers = tuple(
            Layer(
                weight=_frozen(as_matrix(w, f"layer {i} weight")),
                bias=_frozen(np.asarray(b, dtype=np.float64).reshape(-1)),
                activation=activation if i < n - 1 else ActivationKind.IDENTITY,
            )
            for i, (w, b) in enumerate(zip(weights, biases))
        )
        return cls(arch=arch, activation=activation, layers=layers)

    @property
    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    @property
    def biases(self) -> list[np.ndarray]:
        return [layer.bias for layer in self.layers]

    def params(self) -> ParamSet:
        tensors: list[np.ndarray] = []
        for layer in self.layers:
            tensors.extend((layer.weight, layer.bias))
        return ParamSet(tuple(tensors))

    def with_params(self, params: ParamSet) -> "Network":
        self.params().check_compatible(params)
        return Network.from_arrays(self.arch, self.activation, params.tensors[0::2], params.tensors[1::2])

    @property
    def n_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)


def init_network(arch: Architecture, activation: ActivationKind, seed: int) -> Network:
    """Glorot-uniform weights, zero biases; deterministic per (arch, seed)"""
    if not isinstance(arch, Architecture):
        arch = Architecture.parse(arch)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_w, in_w in arch.layer_dims():
        limit = np.sqrt(6.0 / (in_w + out_w))
        weights.append(rng.uniform(-limit, limit, size=(out_w, in_w)))
        biases.append(np.zeros(out_w))
    return Network.from_arrays(arch, activation, weights, biases)


# --- Forward ---
def _check_input(net: Network, x) -> np.ndarray:
    x = as_matrix(x, "input")
    if x.shape[1] != net.arch.widths[0]:
        raise ShapeMismatchError(f"layer 0: input has {x.shape[1]} columns, architecture expects {net.arch.widths[0]}")
    return x


def forward_trace(net: Network, x) -> list[tuple[np.ndarray, np.ndarray]]:
    """(pre-activation, activation) per layer; the input is prepended as (x, x)"""
    a = _check_input(net, x)
    trace = [(a, a)]
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        a = activate(layer.activation, z)
        trace.append((z, a))
    return trace


def forward(net: Network, x) -> np.ndarray:
    return forward_trace(net, x)[-1][1]


# --- Losses ---
def _as_targets(pred: np.ndarray, target, kind: LossKind) -> np.ndarray:
    target = as_matrix(target, "target")
    if kind is LossKind.MSE:
        if target.shape != pred.shape:
            raise ShapeMismatchError(f"mse needs matching shapes, got {pred.shape} and {target.shape}")
        return target
    if target.shape == pred.shape:
        return target
    if target.shape == (pred.shape[0], 1):
        labels = target[:, 0].astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= pred.shape[1]):
            raise ShapeMismatchError(f"labels must lie in [0, {pred.shape[1]}), got {labels.min()}..{labels.max()}")
        onehot = np.zeros_like(pred)
        onehot[np.arange(pred.shape[0]), labels] = 1.0
        return onehot
    raise ShapeMismatchError(f"cross-entropy target shape {target.shape} fits neither logits {pred.shape} nor labels")


def loss(pred, target, kind: LossKind) -> float:
    """Mean loss over the batch"""
    pred = as_matrix(pred, "prediction")
    t = _as_targets(pred, target, kind)
    if kind is LossKind.MSE:
        return float(np.mean((pred - t) ** 2))
    return float(np.mean(-np.sum(t * log_softmax(pred, axis=1), axis=1)))


def loss_grad(pred: np.ndarray, target, kind: LossKind) -> np.ndarray:
    """d loss / d pred"""
    t = _as_targets(pred, target, kind)
    if kind is LossKind.MSE:
        return 2.0 * (pred - t) / pred.size
    n = pred.shape[0]
    return (softmax(pred, axis=1) * t.sum(axis=1, keepdims=True) - t) / n


# --- Backward ---
def value_and_grad(net: Network, x, target, kind: LossKind) -> tuple[float, Gradients]:
    trace = forward_trace(net, x)
    pred = trace[-1][1]
    value = loss(pred, target, kind)
    delta_a = loss_grad(pred, target, kind)
    grads: list[np.ndarray] = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        z, _ = trace[i + 1]
        a_prev = trace[i][1]
        delta = delta_a * activation_grad(layer.activation, z)
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ a_prev)
        delta_a = delta @ layer.weight
    grads.reverse()
    return value, ParamSet(tuple(grads))


def backward(net: Network, x, target, kind: LossKind) -> Gradients:
    return value_and_grad(net, x, target, kind)[1]


def grad_check(net: Network, batch: tuple, kind: LossKind, h: float = 1e-6) -> float:
    """Max relative error between backward and central differences over every parameter"""
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"h must lie in (0, 1e-3], got {h}")
    x, target = batch
    analytic = backward(net, x, target, kind)
    params = net.params()
    worst = 0.0
    for k, tensor in enumerate(params.tensors):
        for idx in np.ndindex(tensor.shape):
            plus = [np.array(t) for t in params.tensors]
            minus = [np.array(t) for t in params.tensors]
            plus[k][idx] += h
            minus[k][idx] -= h
            lp = loss(forward(net.with_params(ParamSet(tuple(plus))), x), target, kind)
            lm = loss(forward(net.with_params(ParamSet(tuple(minus))), x), target, kind)
            fd = (lp - lm) / (2.0 * h)
            an = analytic[k][idx]
            worst = max(worst, abs(an - fd) / (abs(an) + abs(fd) + 1e-12))
    return worst


# --- Evaluation ---
def score(net: Network, x, y, kind: LossKind) -> float:
    """MSE for regression, accuracy for classification"""
    pred = forward(net, x)
    if kind is LossKind.MSE:
        return loss(pred, y, kind)
    t = _as_targets(pred, y, kind)
    return float(np.mean(np.argmax(pred, axis=1) == np.argmax(t, axis=1)))


# --- Serialization ---
def to_document(net: Network) -> NetworkDocument:
    return NetworkDocument(
        arch=list(net.arch.widths),
        filter_size=net.arch.filter_size,
        activation=net.activation,
        layers=[LayerDocument(w=layer.weight.tolist(), b=layer.bias.tolist()) for layer in net.layers],
    )


def from_document(doc: NetworkDocument) -> Network:
    arch = Architecture.parse(doc.arch, doc.filter_size)
    return Network.from_arrays(
        arch,
        doc.activation,
        [np.asarray(layer.w, dtype=np.float64) for layer in doc.layers],
        [np.asarray(layer.b, dtype=np.float64) for layer in doc.layers],
    )


def save_network(net: Network, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(to_document(net).model_dump(mode="json")))
    return path


def load_network(path: Path) -> Network:
    return from_document(NetworkDocument.model_validate_json(Path(path).read_bytes()))


def stack_batches(batches: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = zip(*batches)
    return np.vstack(xs), np.vstack(ys)
