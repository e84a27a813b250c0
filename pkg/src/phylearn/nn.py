"""Fully-connected feed-forward networks, losses, backpropagation and training.

A network maps a column vector ``x0`` of width ``n0`` through ``L`` dense
layers, ``x_l = act_l(W_l @ x_{l-1} + b_l)``. Every function here also
accepts a column-stacked batch of shape ``(n0, T)``.

Flat parameter layout (shared by gradients, ``Network.parameters`` and the
on-disk format): layer 1 weights row-major, layer 1 bias, layer 2 weights,
layer 2 bias, and so on.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from phylearn.errors import (
    InvalidParameterError,
    ParseError,
    ShapeError,
    TrainingDivergedError,
)
from phylearn.numerics import RngStream, affine, as_matrix, as_vector

__all__ = [
    "Activation",
    "DenseLayer",
    "Network",
    "TrainConfig",
    "backward",
    "batch_gradient",
    "cross_entropy_loss",
    "forward",
    "init_network",
    "layer_forward",
    "load_network",
    "mse_loss",
    "read_flat_file",
    "save_network",
    "train",
    "write_flat_file",
]

FORMAT_VERSION = 1
NETWORK_TAG = "phylearn-network"


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.IDENTITY:
        return z
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.SIGMOID:
        return special.expit(z)
    return special.softmax(z, axis=0)


def _activation_vjp(kind: Activation, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull the output cotangent ``g`` back through the activation."""
    if kind is Activation.IDENTITY:
        return g
    if kind is Activation.RELU:
        return g * (z > 0.0)
    if kind is Activation.TANH:
        return g * (1.0 - a * a)
    if kind is Activation.SIGMOID:
        return g * a * (1.0 - a)
    return a * (g - np.sum(g * a, axis=0, keepdims=True))


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        w = as_matrix(self.weights, "weights")
        b = as_vector(self.bias, "bias")
        if w.shape[0] != b.shape[0]:
            raise ShapeError(f"weights {w.shape} and bias {b.shape} disagree")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Network:
    """Ordered stack of dense layers. Immutable; safe to share across threads."""

    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidParameterError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].n_in != layers[i - 1].n_out:
                raise ShapeError(
                    f"layer {i + 1} expects width {layers[i].n_in}, "
                    f"layer {i} produces {layers[i - 1].n_out}"
                )
        for layer in layers[:-1]:
            if layer.activation is Activation.SOFTMAX:
                raise InvalidParameterError("softmax is only allowed on the output layer")
        object.__setattr__(self, "layers", layers)

    def __call__(self, x):
        return forward(self, x)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].n_in,) + tuple(layer.n_out for layer in self.layers)

    @property
    def activations(self) -> tuple[Activation, ...]:
        return tuple(layer.activation for layer in self.layers)

    @property
    def param_count(self) -> int:
        w = self.widths
        return sum(w[l] * (w[l - 1] + 1) for l in range(1, len(w)))

    def parameters(self) -> np.ndarray:
        """All weights and biases flattened in the documented layout."""
        return np.concatenate(
            [np.concatenate([layer.weights.ravel(), layer.bias]) for layer in self.layers]
        )

    def with_parameters(self, theta) -> "Network":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_count,):
            raise ShapeError(f"expected {self.param_count} parameters, got shape {theta.shape}")
        layers = []
        pos = 0
        for layer in self.layers:
            nw = layer.weights.size
            w = theta[pos:pos + nw].reshape(layer.weights.shape)
            pos += nw
            b = theta[pos:pos + layer.n_out]
            pos += layer.n_out
            layers.append(DenseLayer(w.copy(), b.copy(), layer.activation))
        return Network(tuple(layers))


def init_network(
    widths: Sequence[int],
    activations: Sequence[Activation | str],
    seed: int,
) -> Network:
    """Scaled-uniform initialization: weights on (-a, a), a = sqrt(6 / (n_in + n_out)).

    Biases start at zero. Draws come from ``RngStream(seed, 0)``.
    """
    widths = [int(n) for n in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise InvalidParameterError(f"invalid widths {widths}")
    if len(activations) != len(widths) - 1:
        raise InvalidParameterError(
            f"{len(widths) - 1} layers need as many activations, got {len(activations)}"
        )
    rng = RngStream(seed, 0)
    layers = []
    for n_in, n_out, act in zip(widths[:-1], widths[1:], activations):
        a = math.sqrt(6.0 / (n_in + n_out))
        layers.append(DenseLayer(rng.uniform(-a, a, (n_out, n_in)), np.zeros(n_out), act))
    return Network(tuple(layers))


def layer_forward(layer: DenseLayer, x) -> np.ndarray:
    return _activate(layer.activation, affine(layer.weights, x, layer.bias))


def forward(net: Network, x0) -> np.ndarray:
    x = np.asarray(x0, dtype=np.float64)
    if x.shape[0] != net.layers[0].n_in:
        raise ShapeError(f"input width {x.shape[0]} != network input width {net.layers[0].n_in}")
    for layer in net.layers:
        x = layer_forward(layer, x)
    return x


def _forward_cache(net: Network, x: np.ndarray):
    zs, acts = [], [x]
    for layer in net.layers:
        z = affine(layer.weights, acts[-1], layer.bias)
        zs.append(z)
        acts.append(_activate(layer.activation, z))
    return zs, acts


def _as_batch(net: Network, inputs, targets):
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != net.widths[0]:
        raise ShapeError(f"input width {x.shape[0]} != network input width {net.widths[0]}")
    if y.shape[0] != net.widths[-1]:
        raise ShapeError(f"target width {y.shape[0]} != network output width {net.widths[-1]}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"{x.shape[1]} inputs but {y.shape[1]} targets")
    if x.shape[1] == 0:
        raise InvalidParameterError("empty training set")
    return x, y


def _check_one_hot(y: np.ndarray) -> None:
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=0) == 1.0).all()):
        raise InvalidParameterError("cross-entropy targets must be one-hot columns")


def _unpack(data):
    if hasattr(data, "inputs"):
        return data.inputs, data.targets
    return data


def mse_loss(net: Network, data) -> float:
    """Mean over examples of the squared Euclidean output error.

    ``data`` is a :class:`~phylearn.dataset.TrainingSet` or an
    ``(inputs, targets)`` pair of column-stacked arrays.
    """
    x, y = _as_batch(net, *_unpack(data))
    diff = y - forward(net, x)
    return float(np.sum(diff * diff) / x.shape[1])


def cross_entropy_loss(net: Network, data) -> float:
    """Mean negative log-probability of the true class (softmax output, one-hot targets)."""
    x, y = _as_batch(net, *_unpack(data))
    _check_one_hot(y)
    if net.layers[-1].activation is not Activation.SOFTMAX:
        raise InvalidParameterError("cross-entropy needs a softmax output layer")
    zs, _ = _forward_cache(net, x)
    logp = special.log_softmax(zs[-1], axis=0)
    return float(-np.sum(y * logp) / x.shape[1])


def _loss_value(net: Network, x, y, loss: str) -> float:
    if loss == "mse":
        return mse_loss(net, (x, y))
    if loss == "cross-entropy":
        return cross_entropy_loss(net, (x, y))
    raise InvalidParameterError(f"unknown loss {loss!r}")


def batch_gradient(net: Network, inputs, targets, loss: str = "mse") -> np.ndarray:
    """Gradient of the mean loss over the columns of ``inputs``/``targets``."""
    x, y = _as_batch(net, inputs, targets)
    t = x.shape[1]
    zs, acts = _forward_cache(net, x)
    out = net.layers[-1]
    if loss == "mse":
        delta = _activation_vjp(out.activation, zs[-1], acts[-1], 2.0 * (acts[-1] - y) / t)
    elif loss == "cross-entropy":
        _check_one_hot(y)
        if out.activation is not Activation.SOFTMAX:
            raise InvalidParameterError("cross-entropy needs a softmax output layer")
        delta = (acts[-1] - y) / t
    else:
        raise InvalidParameterError(f"unknown loss {loss!r}")

    grads = []
    for l in range(net.depth - 1, -1, -1):
        layer = net.layers[l]
        grads.append(delta.sum(axis=1))
        grads.append((delta @ acts[l].T).ravel())
        if l > 0:
            prev = net.layers[l - 1]
            delta = _activation_vjp(prev.activation, zs[l - 1], acts[l], layer.weights.T @ delta)
    return np.concatenate(grads[::-1])


def backward(net: Network, x, target, loss: str = "mse") -> np.ndarray:
    """Exact gradient of the single-example loss with respect to all parameters."""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if x.ndim != 1 or target.ndim != 1:
        raise ShapeError(f"backward takes one example, got shapes {x.shape} and {target.shape}")
    return batch_gradient(net, x, target, loss)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    init: str = "scaled-uniform"
    loss: str = "mse"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0  # per-epoch multiplicative factor

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse", "cross-entropy"):
            raise InvalidParameterError(f"unknown loss {self.loss!r}")
        if self.init != "scaled-uniform":
            raise InvalidParameterError(f"unknown init {self.init!r}")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise InvalidParameterError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidParameterError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidParameterError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")


@dataclass
class _Adam:
    cfg: TrainConfig
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    def update(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        c = self.cfg
        self.step += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        m_hat = self.m / (1.0 - c.beta1 ** self.step)
        v_hat = self.v / (1.0 - c.beta2 ** self.step)
        return theta - lr * m_hat / (np.sqrt(v_hat) + c.eps)


def train(net: Network, data, cfg: TrainConfig) -> tuple[Network, list[float]]:
    """Mini-batch training for ``cfg.epochs`` epochs.

    Batches come from a fresh shuffle each epoch drawn from
    ``RngStream(cfg.seed, 1)``; a short final batch is kept. Returns the trained
    network and the full-set loss after every epoch.

    Raises
    ------
    TrainingDivergedError
        If the loss becomes non-finite; carries the 1-based epoch index.
    """
    x, y = _as_batch(net, *_unpack(data))
    t = x.shape[1]
    if cfg.batch_size > t:
        raise InvalidParameterError(f"batch size {cfg.batch_size} exceeds training-set size {t}")
    if cfg.loss == "cross-entropy":
        _check_one_hot(y)

    rng = RngStream(cfg.seed, 1)
    theta = net.parameters()
    adam = _Adam(cfg, np.zeros_like(theta), np.zeros_like(theta))
    history: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(t)
        lr = cfg.learning_rate * cfg.lr_decay ** (epoch - 1)
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, t, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                try:
                    current = net.with_parameters(theta)
                except InvalidParameterError:
                    raise TrainingDivergedError(epoch, math.nan) from None
                grad = batch_gradient(current, x[:, idx], y[:, idx], cfg.loss)
                if cfg.optimizer == "adam":
                    theta = adam.update(theta, grad, lr)
                else:
                    theta = theta - lr * grad
            try:
                net = net.with_parameters(theta)
                value = _loss_value(net, x, y, cfg.loss)
            except InvalidParameterError:
                value = math.nan
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch, value)
        history.append(value)
    return net, history


def write_flat_file(path, tag: str, header: dict[str, Sequence], values) -> None:
    """Write a versioned header followed by one full-precision value per line."""
    lines = [f"{tag} {FORMAT_VERSION}"]
    for key, items in header.items():
        lines.append(" ".join([key, *(str(v) for v in items)]))
    values = np.asarray(values, dtype=np.float64).ravel()
    lines.append(f"values {values.size}")
    lines.extend(repr(float(v)) for v in values)
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_flat_file(path, tag: str) -> tuple[dict[str, list[str]], np.ndarray]:
    with open(os.fspath(path), encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    first = lines[0].split()
    if len(first) != 2 or first[0] != tag:
        raise ParseError(f"expected header tag {tag!r}", 1)
    if first[1] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported format version {first[1]}", 1)
    header: dict[str, list[str]] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("values"):
        key, *rest = lines[i].split()
        header[key] = rest
        i += 1
    if i == len(lines):
        raise ParseError("missing 'values' line", i + 1)
    try:
        count = int(lines[i].split()[1])
    except (IndexError, ValueError):
        raise ParseError("malformed 'values' line", i + 1) from None
    body = lines[i + 1:]
    if len(body) != count:
        raise ParseError(f"expected {count} values, found {len(body)}", i + 1)
    out = np.empty(count)
    for j, text in enumerate(body):
        try:
            out[j] = float(text)
        except ValueError:
            raise ParseError(f"not a number: {text!r}", i + 2 + j) from None
    return header, out


def save_network(net: Network, path) -> None:
    write_flat_file(
        path,
        NETWORK_TAG,
        {
            "layers": [net.depth],
            "widths": net.widths,
            "activations": [a.value for a in net.activations],
        },
        net.parameters(),
    )


def load_network(path) -> Network:
    header, theta = read_flat_file(path, NETWORK_TAG)
    try:
        depth = int(header["layers"][0])
        widths = [int(w) for w in header["widths"]]
        acts = [Activation(a) for a in header["activations"]]
    except (KeyError, IndexError, ValueError) as exc:
        raise ParseError(f"bad network header: {exc}") from None
    if len(widths) != depth + 1 or len(acts) != depth:
        raise ParseError("header layer count disagrees with widths/activations")
    skeleton = Network(tuple(
        DenseLayer(np.zeros((n_out, n_in)), np.zeros(n_out), act)
        for n_in, n_out, act in zip(widths[:-1], widths[1:], acts)
    ))
    if theta.size != skeleton.param_count:
        raise ParseError(f"expected {skeleton.param_count} parameters, found {theta.size}")
    return skeleton.with_parameters(theta)
