"""Feedforward ReLU networks with explicit, per-sample-weighted backprop.

Everything is float64 numpy. A :class:`Network` is treated as an immutable
snapshot: :func:`sgd_step` returns a new network instead of updating in place,
and the parameter arrays are flagged read-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

NETWORK_FORMAT = "pgdro-network"
NETWORK_FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Raised when an array does not have the shape an operation needs."""

    def __init__(self, what: str, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class NonFiniteError(FloatingPointError):
    pass


def _frozen(a, ndim: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True, ndmin=ndim)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Network:
    """Fully connected network; ReLU on hidden layers, raw logits out.

    ``weights[i]`` has shape ``(layer_sizes[i], layer_sizes[i + 1])`` and
    ``biases[i]`` has length ``layer_sizes[i + 1]``.
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        weights = tuple(_frozen(w, 2) for w in self.weights)
        biases = tuple(_frozen(b, 1) for b in self.biases)
        if len(weights) == 0 or len(weights) != len(biases):
            raise DimensionError("layer count", f"{len(weights)} biases (>= 1)", len(biases))
        for i, (w, b) in enumerate(zip(weights, biases)):
            if i > 0 and w.shape[0] != weights[i - 1].shape[1]:
                raise DimensionError(f"weights[{i}] rows", weights[i - 1].shape[1], w.shape[0])
            if b.shape != (w.shape[1],):
                raise DimensionError(f"biases[{i}] shape", (w.shape[1],), b.shape)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in the order w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass(frozen=True)
class Gradients:
    weights: tuple
    biases: tuple

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])


def init_network(layer_sizes: Sequence[int], seed: int | np.random.Generator) -> Network:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"layer_sizes needs >= 2 positive entries, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(tuple(weights), tuple(biases))


def zero_network(layer_sizes: Sequence[int]) -> Network:
    sizes = [int(s) for s in layer_sizes]
    return Network(
        tuple(np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])),
        tuple(np.zeros(b) for b in sizes[1:]),
    )


def _check_input(net: Network, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.layer_sizes[0]:
        raise DimensionError("input columns", net.layer_sizes[0], X.shape[1] if X.ndim == 2 else X.shape)
    return X


def _forward_trace(net: Network, X: np.ndarray) -> list[np.ndarray]:
    # activations[0] = X, activations[-1] = logits; hidden entries are post-ReLU
    acts = [X]
    h = X
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(net: Network, X) -> np.ndarray:
    """Logits of shape ``(N, num_classes)``."""
    return _forward_trace(net, _check_input(net, X))[-1]


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError("labels length", n, labels.shape)
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {labels[i]} at row {i} outside [0, {k})")
    return labels.astype(np.intp)


def softmax_cross_entropy(logits, labels) -> np.ndarray:
    """Per-sample cross-entropy, computed from max-shifted logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError("logits ndim", 2, logits.ndim)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def forward_cached(net: Network, X) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the per-layer activations :func:`backward_cached` needs."""
    acts = _forward_trace(net, _check_input(net, X))
    return acts[-1], acts


def backward_cached(net: Network, acts: list[np.ndarray], labels, sample_weights) -> Gradients:
    n = acts[0].shape[0]
    labels = _check_labels(labels, n, net.num_classes)
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise DimensionError("sample_weights length", n, w.shape)
    if np.any(w < 0):
        raise ValueError("sample_weights must be nonnegative")

    delta = softmax(acts[-1])
    delta[np.arange(n), labels] -= 1.0
    delta *= w[:, None]

    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0)
    return Gradients(tuple(gw), tuple(gb))


def backward(net: Network, X, labels, sample_weights) -> Gradients:
    """Gradient of ``sum_i w_i * CE(net(x_i), y_i)`` w.r.t. every parameter."""
    _, acts = forward_cached(net, X)
    return backward_cached(net, acts, labels, sample_weights)


def weighted_loss(net: Network, X, labels, sample_weights) -> float:
    losses = softmax_cross_entropy(forward(net, X), labels)
    return float(np.dot(np.asarray(sample_weights, dtype=np.float64), losses))


def _with_parameters(net: Network, params: Sequence[np.ndarray]) -> Network:
    return Network(tuple(params[0::2]), tuple(params[1::2]))


def finite_difference_gradient(
    net: Network, loss_fn: Callable[[Network], float], step: float = 1e-5
) -> Gradients:
    """Central-difference estimate of ``d loss_fn(net) / d theta``, one parameter at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = [np.array(p) for p in net.parameters()]
    grads = [np.zeros_like(p) for p in base]
    for k, p in enumerate(base):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            f_plus = loss_fn(_with_parameters(net, base))
            p[idx] = orig - step
            f_minus = loss_fn(_with_parameters(net, base))
            p[idx] = orig
            grads[k][idx] = (f_plus - f_minus) / (2.0 * step)
    return Gradients(tuple(grads[0::2]), tuple(grads[1::2]))


def sgd_step(net: Network, grads: Gradients, lr: float, l2: float = 0.0) -> Network:
    """theta <- theta - lr * (grad + l2 * theta)."""
    if lr < 0 or l2 < 0:
        raise ValueError(f"lr and l2 must be nonnegative, got lr={lr}, l2={l2}")
    new = []
    for p, g in zip(net.parameters(), grads.parameters()):
        if g.shape != p.shape:
            raise DimensionError("gradient shape", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient entry in parameter of shape {p.shape}")
        new.append(p - lr * (g + l2 * p))
    return _with_parameters(net, new)


def max_abs_diff(a: Network, b: Network) -> float:
    return max(float(np.max(np.abs(p - q))) for p, q in zip(a.parameters(), b.parameters()))


def network_to_dict(net: Network) -> dict:
    return {
        "format": NETWORK_FORMAT,
        "version": NETWORK_FORMAT_VERSION,
        "layer_sizes": net.layer_sizes,
        "activation": "relu",
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def network_from_dict(d: dict) -> Network:
    if d.get("format") != NETWORK_FORMAT:
        raise ValueError(f"not a {NETWORK_FORMAT} document (format={d.get('format')!r})")
    if d.get("version") != NETWORK_FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {d.get('version')!r}")
    net = Network(
        tuple(np.array(w, dtype=np.float64).reshape(a, b)
              for w, a, b in zip(d["weights"], d["layer_sizes"][:-1], d["layer_sizes"][1:])),
        tuple(np.array(b, dtype=np.float64) for b in d["biases"]),
    )
    if net.layer_sizes != list(d["layer_sizes"]):
        raise DimensionError("layer_sizes", d["layer_sizes"], net.layer_sizes)
    return net


def save_network(net: Network, path) -> None:
    # json writes floats with repr(), so the round-trip is exact
    Path(path).write_text(json.dumps(network_to_dict(net)) + "\n")


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text()))
