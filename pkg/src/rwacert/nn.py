"""Minimal fully-connected ReLU networks with hand-rolled reverse-mode gradients.

Networks are immutable: every update returns a new ``Mlp``. All hidden layers
use ReLU, the output layer is linear. Arithmetic is float64 numpy throughout,
which keeps forward evaluation, training, and the verifier's bound propagation
on one code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Mlp",
    "GradientSet",
    "ForwardTrace",
    "NetworkFormatError",
    "forward",
    "forward_trace",
    "gradients",
    "input_gradients",
    "init",
    "sgd_step",
    "save",
    "load",
    "to_dict",
    "from_dict",
]


class NetworkFormatError(ValueError):
    """Raised when a serialized network file is malformed or inconsistent."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)  # always copy; never touch caller flags
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Mlp:
    """Parameters of a ReLU MLP: ``weights[i]`` has shape (fan_out, fan_in)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        if not self.weights:
            raise ValueError("network needs at least one layer")
        object.__setattr__(self, "weights", tuple(_freeze(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_freeze(b) for b in self.biases))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: fan-in {w.shape[1]} does not match previous layer")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[0]

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class GradientSet:
    """Gradient arrays shaped exactly like the parameters of one ``Mlp``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def check_congruent(self, net: Mlp) -> None:
        ok = len(self.weights) == len(net.weights) and all(
            gw.shape == w.shape and gb.shape == b.shape
            for gw, gb, w, b in zip(self.weights, self.biases, net.weights, net.biases)
        )
        if not ok:
            raise ValueError("gradient shapes do not match network parameters")

    def scaled(self, factor: float) -> GradientSet:
        return GradientSet(
            tuple(factor * w for w in self.weights),
            tuple(factor * b for b in self.biases),
        )

    def added(self, other: GradientSet) -> GradientSet:
        return GradientSet(
            tuple(a + b for a, b in zip(self.weights, other.weights)),
            tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    @staticmethod
    def zeros_like(net: Mlp) -> GradientSet:
        return GradientSet(
            tuple(np.zeros_like(w) for w in net.weights),
            tuple(np.zeros_like(b) for b in net.biases),
        )


@dataclass(frozen=True)
class ForwardTrace:
    """Recorded activations of one forward pass, consumed by ``gradients``."""

    layer_inputs: tuple[np.ndarray, ...]  # input to each layer, batch-shaped (N, fan_in)
    preactivations: tuple[np.ndarray, ...]  # affine outputs before ReLU / identity


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError(f"expected a vector or a batch of vectors, got shape {arr.shape}")


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on a single input vector or an (N, d) batch."""
    batch, squeeze = _as_batch(x)
    if batch.shape[1] != net.input_size:
        raise ValueError(f"input size {batch.shape[1]} != network input {net.input_size}")
    h = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def forward_trace(net: Mlp, x) -> tuple[np.ndarray, ForwardTrace]:
    """Forward pass that records per-layer activations for backpropagation."""
    batch, squeeze = _as_batch(x)
    if batch.shape[1] != net.input_size:
        raise ValueError(f"input size {batch.shape[1]} != network input {net.input_size}")
    inputs = []
    preacts = []
    h = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    out = h[0] if squeeze else h
    return out, ForwardTrace(tuple(inputs), tuple(preacts))


def gradients(net: Mlp, trace: ForwardTrace, out_adjoint) -> tuple[GradientSet, np.ndarray]:
    """Exact reverse-mode gradients from recorded activations.

    ``out_adjoint`` is dLoss/dOutput, a vector or (N, out) batch matching the
    traced forward pass. Returns parameter gradients (summed over the batch)
    and the adjoint propagated back to the network input. The ReLU subgradient
    at exactly zero is taken to be zero.
    """
    if trace is None or not isinstance(trace, ForwardTrace) or not trace.layer_inputs:
        raise ValueError("gradients requires the trace of a recorded forward pass")
    if len(trace.layer_inputs) != len(net.weights):
        raise ValueError("trace does not match network depth")
    adj, squeeze = _as_batch(out_adjoint)
    if adj.shape != trace.preactivations[-1].shape:
        raise ValueError(
            f"adjoint shape {adj.shape} != traced output shape {trace.preactivations[-1].shape}"
        )
    grad_w: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            adj = adj * (trace.preactivations[i] > 0.0)
        grad_w[i] = adj.T @ trace.layer_inputs[i]
        grad_b[i] = adj.sum(axis=0)
        adj = adj @ net.weights[i]
    input_adj = adj[0] if squeeze else adj
    return GradientSet(tuple(grad_w), tuple(grad_b)), input_adj


def input_gradients(net: Mlp, trace: ForwardTrace, out_adjoint) -> np.ndarray:
    """Adjoint with respect to the network input only (parameters untouched)."""
    _, input_adj = gradients(net, trace, out_adjoint)
    return input_adj


def init(layer_sizes, seed: int) -> Mlp:
    """Seed-deterministic Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise ValueError("need at least one hidden layer: [in, hidden..., out]")
    if any(s <= 0 for s in sizes):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(weights), tuple(biases))


def sgd_step(net: Mlp, grads: GradientSet, lr: float) -> Mlp:
    """One plain gradient-descent step; returns a new network."""
    grads.check_congruent(net)
    return Mlp(
        tuple(w - lr * gw for w, gw in zip(net.weights, grads.weights)),
        tuple(b - lr * gb for b, gb in zip(net.biases, grads.biases)),
    )


def to_dict(net: Mlp) -> dict:
    return {
        "kind": "relu-mlp",
        "layer_sizes": list(net.layer_sizes),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def from_dict(doc: dict) -> Mlp:
    try:
        if doc.get("kind") != "relu-mlp":
            raise NetworkFormatError(f"unsupported network kind: {doc.get('kind')!r}")
        sizes = [int(s) for s in doc["layer_sizes"]]
        weights = tuple(np.array(w, dtype=np.float64) for w in doc["weights"])
        biases = tuple(np.array(b, dtype=np.float64) for b in doc["biases"])
    except NetworkFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"malformed network document: {exc}") from exc
    try:
        net = Mlp(weights, biases)
    except ValueError as exc:
        raise NetworkFormatError(str(exc)) from exc
    if list(net.layer_sizes) != sizes:
        raise NetworkFormatError(
            f"declared layer sizes {sizes} do not match parameters {list(net.layer_sizes)}"
        )
    return net


def save(net: Mlp, path) -> None:
    """Write the network as JSON; decimal encoding round-trips float64 exactly."""
    Path(path).write_text(json.dumps(to_dict(net)))


def load(path) -> Mlp:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise NetworkFormatError(f"cannot read network file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkFormatError(f"network file {path} does not hold an object")
    return from_dict(doc)
