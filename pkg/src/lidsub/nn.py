"""Dense feedforward networks in plain numpy.

Every layer computes ``act(W @ h + b)`` with ``W`` stored as ``(out_dim, in_dim)``.
Inputs may be a single sample ``(d,)`` or a batch ``(n, d)``; all outputs keep
the same leading layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, InsufficientDataError

ACTIVATIONS = ("identity", "relu")

MODEL_A = (784, 128, 64, 10)
MODEL_B = (784, 256, 128, 64, 10)

_MAGIC = b"LIDNN1"


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"layer dimensions must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable stack of dense layers; the last layer emits logits."""

    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.array(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases))
        object.__setattr__(self, "activations", tuple(self.activations))
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ShapeError("weights, biases and activations must be nonempty and of equal length")
        prev = None
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"layer {i}: expects {w.shape[1]} inputs but previous layer emits {prev}")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            prev = w.shape[0]
        if self.activations[-1] != "identity":
            raise ValueError("last layer must use the identity activation (it produces logits)")
        for w in self.weights:
            w.setflags(write=False)
        for b in self.biases:
            b.setflags(write=False)

    @property
    def layers(self) -> list[LayerSpec]:
        return [LayerSpec(w.shape[1], w.shape[0], a) for w, a in zip(self.weights, self.activations)]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def with_params(self, weights, biases) -> "Network":
        return Network(tuple(weights), tuple(biases), self.activations)


@dataclass
class ActivationTrace:
    per_layer: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.per_layer[-1]


def init_network(layer_sizes, seed: int = 0) -> Network:
    """He-initialised relu network with an identity output layer."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ShapeError("need at least an input and an output size")
    rng = np.random.default_rng(seed)
    weights, biases, acts = [], [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
        acts.append("identity" if i == len(sizes) - 2 else "relu")
    return Network(tuple(weights), tuple(biases), tuple(acts))


def _as_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match network input dim {net.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def forward(net: Network, x) -> ActivationTrace:
    h = _as_input(net, x)
    trace = ActivationTrace()
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if act == "relu" else z
        trace.pre_activations.append(z)
        trace.per_layer.append(h)
    return trace


def logits(net: Network, x) -> np.ndarray:
    return forward(net, x).logits


def predict(net: Network, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits(net, x), axis=-1)


def _backward(net: Network, x: np.ndarray, trace: ActivationTrace, dlogits: np.ndarray, want_params=False):
    """Backpropagate d(loss)/d(logits) to the input (and optionally the parameters)."""
    g = dlogits
    gw, gb = [None] * net.n_layers, [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        if net.activations[i] == "relu":
            # subgradient 0 at the kink
            g = g * (trace.pre_activations[i] > 0.0)
        if want_params:
            h_prev = x if i == 0 else trace.per_layer[i - 1]
            gw[i] = np.atleast_2d(g).T @ np.atleast_2d(h_prev)
            gb[i] = np.atleast_2d(g).sum(axis=0)
        g = g @ net.weights[i]
    return g, gw, gb


class CrossEntropy:
    """Softmax cross-entropy against fixed labels (one per row)."""

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def __call__(self, z: np.ndarray):
        z2 = np.atleast_2d(z)
        labels = np.broadcast_to(self.labels, (z2.shape[0],))
        shifted = z2 - z2.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(z2.shape[0])
        value = logsum - shifted[rows, labels]
        grad = np.exp(shifted - logsum[:, None])
        grad[rows, labels] -= 1.0
        if z.ndim == 1:
            return value[0], grad[0]
        return value, grad


class LogitComponent:
    """Loss equal to a single logit, ``Z[index]``."""

    def __init__(self, index: int):
        self.index = int(index)

    def __call__(self, z: np.ndarray):
        grad = np.zeros_like(z)
        grad[..., self.index] = 1.0
        return z[..., self.index], grad


def input_gradient(net: Network, x, loss) -> np.ndarray:
    """Exact d(loss)/dx by backpropagation.

    ``loss`` is any callable mapping logits to ``(value, d value / d logits)``.
    For a batch the gradient of each row's own loss is returned.
    """
    x = _as_input(net, x)
    trace = forward(net, x)
    _, dz = loss(trace.logits)
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != trace.logits.shape:
        raise ShapeError(f"loss gradient shape {dz.shape} != logits shape {trace.logits.shape}")
    return _backward(net, x, trace, dz)[0]


def loss_and_input_gradient(net: Network, x, loss):
    """Like :func:`input_gradient` but also returns the loss value and logits."""
    x = _as_input(net, x)
    trace = forward(net, x)
    value, dz = loss(trace.logits)
    return value, _backward(net, x, trace, np.asarray(dz, dtype=np.float64))[0], trace.logits


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0


def _check_labeled(net: Network, data):
    x = np.asarray(data.samples, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    if len(x) == 0:
        raise InsufficientDataError("dataset is empty")
    if len(x) != len(y):
        raise ShapeError("samples and labels differ in length")
    if y.min() < 0 or y.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    return _as_input(net, x.reshape(len(x), -1)), y


def train(net: Network, data, hp: TrainConfig = TrainConfig()) -> Network:
    """Mini-batch gradient descent on mean cross-entropy; returns a new network."""
    x, y = _check_labeled(net, data)
    rng = np.random.default_rng(hp.seed)
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    for _ in range(hp.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            cur = net.with_params(weights, biases)
            xb = x[idx]
            trace = forward(cur, xb)
            _, dz = CrossEntropy(y[idx])(trace.logits)
            _, gw, gb = _backward(cur, xb, trace, dz / len(idx), want_params=True)
            for i in range(net.n_layers):
                weights[i] -= hp.learning_rate * gw[i]
                biases[i] -= hp.learning_rate * gb[i]
    return net.with_params(weights, biases)


def accuracy(net: Network, data) -> float:
    x, y = _check_labeled(net, data)
    return float(np.mean(predict(net, x) == y))


def save_network(net: Network, path) -> None:
    """Write the LIDNN1 container: int32 header, then float64 weights and biases per layer."""
    parts = [_MAGIC, struct.pack("<i", net.n_layers)]
    for spec in net.layers:
        parts.append(struct.pack("<3i", spec.in_dim, spec.out_dim, ACTIVATIONS.index(spec.activation)))
    for w, b in zip(net.weights, net.biases):
        parts.append(w.astype("<f8").tobytes(order="C"))
        parts.append(b.astype("<f8").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_network(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:6] != _MAGIC:
        raise ValueError(f"{path}: not a LIDNN1 weight file")
    try:
        (n_layers,) = struct.unpack_from("<i", raw, 6)
        off = 10
        specs = []
        for _ in range(n_layers):
            specs.append(struct.unpack_from("<3i", raw, off))
            off += 12
        weights, biases, acts = [], [], []
        for n_in, n_out, code in specs:
            w = np.frombuffer(raw, dtype="<f8", count=n_in * n_out, offset=off).reshape(n_out, n_in)
            off += 8 * n_in * n_out
            b = np.frombuffer(raw, dtype="<f8", count=n_out, offset=off)
            off += 8 * n_out
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
            acts.append(ACTIVATIONS[code])
    except (struct.error, ValueError, IndexError) as exc:
        raise ValueError(f"{path}: truncated or corrupt weight file") from exc
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return Network(tuple(weights), tuple(biases), tuple(acts))
