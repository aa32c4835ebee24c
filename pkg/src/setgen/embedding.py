"""Trainable fully-connected embedding with unit-norm output and exact backprop."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "identity")

NET_FORMAT_VERSION = 1


@dataclass
class AffineLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray    # (out_dim,)
    activation: str     # "relu" or "identity"

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])


@dataclass
class EmbeddingNet:
    """Stack of affine layers followed by l2 normalization of the output."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("embedding net needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer dimension chain broken: {a.out_dim} -> {b.in_dim}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
        if self.layers[-1].activation != "identity":
            raise ValueError("final layer must be identity (normalization follows it)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(
            [AffineLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


class GradientTape:
    """Per-layer gradient accumulators matching a net's parameter shapes.

    Accumulation is additive across samples; one tape per worker when
    training in parallel, merged by summation in a fixed order.
    """

    def __init__(self, net: EmbeddingNet):
        self.weight_grads = [np.zeros_like(l.weight) for l in net.layers]
        self.bias_grads = [np.zeros_like(l.bias) for l in net.layers]

    def zero(self) -> None:
        for g in self.weight_grads:
            g[...] = 0.0
        for g in self.bias_grads:
            g[...] = 0.0

    def add(self, other: "GradientTape") -> None:
        for g, o in zip(self.weight_grads, other.weight_grads):
            g += o
        for g, o in zip(self.bias_grads, other.bias_grads):
            g += o

    def scale(self, factor: float) -> None:
        for g in self.weight_grads:
            g *= factor
        for g in self.bias_grads:
            g *= factor

    def max_abs(self) -> float:
        vals = [np.abs(g).max(initial=0.0) for g in self.weight_grads]
        vals += [np.abs(g).max(initial=0.0) for g in self.bias_grads]
        return float(max(vals))


def init_net(layer_dims, seed) -> EmbeddingNet:
    """Build a net with the given dimension chain.

    Hidden layers use relu, the final layer is identity.  Weights are drawn
    uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases start at
    zero.  Deterministic given the seed.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("layer_dims must list input dim and at least one output dim")
    rng = np.random.default_rng(seed)
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        activation = "identity" if idx == len(dims) - 2 else "relu"
        layers.append(AffineLayer(weight=weight, bias=np.zeros(fan_out), activation=activation))
    return EmbeddingNet(layers)


def _forward_batch(net: EmbeddingNet, X: np.ndarray):
    """Run the batch forward pass, keeping what the backward pass needs."""
    activations = [X]          # inputs of each layer
    pre_acts = []
    a = X
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        pre_acts.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        activations.append(a)
    norms = np.sqrt((a * a).sum(axis=1))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(
            f"pre-normalization output is the zero vector (sample {bad}); "
            "the net is degenerate"
        )
    descriptors = a / norms[:, None]
    return activations, pre_acts, norms, descriptors


def embed_many(net: EmbeddingNet, X) -> np.ndarray:
    """Map a batch of raw vectors to unit-norm descriptors, shape (M, n)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of shape (M, {net.input_dim})")
    return _forward_batch(net, X)[3]


def embed(net: EmbeddingNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise ValueError(f"expected input of shape ({net.input_dim},)")
    return embed_many(net, x[None, :])[0]


def embed_backward_many(net: EmbeddingNet, X, upstream, tape: GradientTape) -> np.ndarray:
    """Backpropagate descriptor gradients for a batch.

    Accumulates parameter gradients (summed over the batch) on the tape and
    returns the gradients w.r.t. the raw inputs.  The forward pass is
    recomputed internally, so no cached state is required.
    """
    X = np.asarray(X, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of shape (M, {net.input_dim})")
    if upstream.shape != (X.shape[0], net.output_dim):
        raise ValueError(f"expected upstream gradients of shape (M, {net.output_dim})")
    activations, pre_acts, norms, descriptors = _forward_batch(net, X)
    # Normalization Jacobian (I - d d^T) / ||u|| applied row-wise.
    radial = (upstream * descriptors).sum(axis=1, keepdims=True)
    g = (upstream - radial * descriptors) / norms[:, None]
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if layer.activation == "relu":
            g = g * (pre_acts[idx] > 0.0)
        tape.weight_grads[idx] += g.T @ activations[idx]
        tape.bias_grads[idx] += g.sum(axis=0)
        g = g @ layer.weight
    return g


def embed_backward(net: EmbeddingNet, x, upstream, tape: GradientTape) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    return embed_backward_many(net, x[None, :], upstream[None, :], tape)[0]


def save_net(net: EmbeddingNet, path) -> None:
    doc = {
        "format_version": NET_FORMAT_VERSION,
        "layers": [
            {
                "activation": l.activation,
                "weight": l.weight.tolist(),  # row-major (out_dim rows)
                "bias": l.bias.tolist(),
            }
            for l in net.layers
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_net(path) -> EmbeddingNet:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != NET_FORMAT_VERSION:
        raise ValueError(f"unsupported net format version {doc.get('format_version')}")
    layers = [
        AffineLayer(
            weight=np.asarray(spec["weight"], dtype=float),
            bias=np.asarray(spec["bias"], dtype=float),
            activation=spec["activation"],
        )
        for spec in doc["layers"]
    ]
    return EmbeddingNet(layers)
