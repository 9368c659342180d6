"""Dense network primitives with analytic forward/backward passes.

Matrices are C-order float64 ndarrays throughout (weights are out x in, data
batches are batch x features). The loss is softmax cross-entropy averaged over
the mini-batch, so gradient scales do not depend on the batch size. Gradients
are summed over the batch inside the mean, which is what makes the first-layer
identity hold: when exactly one example drives a neuron, the weight-gradient
row divided by the bias gradient reproduces that example's layer input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .rng import RngStream

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    """Fully-connected layer: weights (out x in), bias (out,), activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ConfigurationError("dense layer needs 2-D weights and 1-D bias")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ConfigurationError(
                f"bias length {self.bias.shape[0]} != output size {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class EmbeddingLayer:
    """Token embedding table (vocab x dim) with an optional reserved pad token."""

    table: np.ndarray
    pad_token: int | None = None

    def __post_init__(self) -> None:
        self.table = np.ascontiguousarray(self.table, dtype=np.float64)
        if self.table.ndim != 2 or self.table.shape[0] < 1 or self.table.shape[1] < 1:
            raise ConfigurationError("embedding table must be vocab x dim with both >= 1")

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass
class Model:
    """Ordered dense layers, optionally preceded by an embedding lookup."""

    layers: list[DenseLayer]
    embedding: EmbeddingLayer | None = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigurationError("model needs at least one dense layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer output {a.out_dim} does not feed layer input {b.in_dim}"
                )
        if self.embedding is not None and self.embedding.dim != self.layers[0].in_dim:
            raise ConfigurationError("embedding dim does not match first layer input")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Model":
        emb = None
        if self.embedding is not None:
            emb = EmbeddingLayer(self.embedding.table.copy(), self.embedding.pad_token)
        return Model([l.copy() for l in self.layers], emb)


@dataclass
class MiniBatch:
    """One user's sampled batch: float features (B x d) or token rows (B x L)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.inputs = np.asarray(self.inputs)
        if self.inputs.ndim != 2:
            raise InputError("batch inputs must be 2-D")
        if self.labels.shape != (self.inputs.shape[0],):
            raise InputError("one label per batch row required")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class LayerGrad:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class GradientUpdate:
    """Per-layer (weight, bias) gradients from one local step."""

    layers: list[LayerGrad]
    batch_size: int = 0

    def copy(self) -> "GradientUpdate":
        return GradientUpdate(
            [LayerGrad(l.weights.copy(), l.bias.copy()) for l in self.layers],
            self.batch_size,
        )


@dataclass
class ForwardState:
    """Everything backward() needs: inputs, pre-activations, activations, probs."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    probabilities: np.ndarray
    loss: float


def embed(layer: EmbeddingLayer, token_rows: np.ndarray) -> np.ndarray:
    """Mean-pool token embeddings per row, skipping the reserved pad token.

    A row of only pad tokens pools to the zero vector.
    """
    rows = np.asarray(token_rows)
    if rows.ndim == 1:
        rows = rows[:, None]
    if not np.issubdtype(rows.dtype, np.integer):
        raise InputError("token rows must be integer indices")
    if rows.size and (rows.min() < 0 or rows.max() >= layer.vocab):
        raise InputError(
            f"token index out of range [0, {layer.vocab}): "
            f"min={rows.min()}, max={rows.max()}"
        )
    vectors = layer.table[rows]  # B x L x dim
    if layer.pad_token is None:
        return vectors.mean(axis=1)
    keep = (rows != layer.pad_token).astype(np.float64)  # B x L
    counts = keep.sum(axis=1)
    pooled = np.einsum("bld,bl->bd", vectors, keep)
    nonzero = counts > 0
    pooled[nonzero] /= counts[nonzero, None]
    return pooled


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: Model, batch: MiniBatch) -> ForwardState:
    """Run the batch through the model; loss is mean softmax cross-entropy."""
    if model.embedding is not None:
        x = embed(model.embedding, batch.inputs)
    else:
        x = np.asarray(batch.inputs, dtype=np.float64)
    if x.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"batch feature dim {x.shape[1]} != model input dim {model.input_dim}"
        )
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= model.output_dim):
        raise InputError("labels out of range for the model's output layer")

    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = [x]
    for layer in model.layers:
        z = acts[-1] @ layer.weights.T + layer.bias
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)

    probs = _softmax(acts[-1])
    n = batch.size
    loss = float(-np.log(probs[np.arange(n), batch.labels] + 1e-300).mean())
    if not np.isfinite(loss):
        raise InputError("non-finite loss; inputs or weights out of range")
    return ForwardState(x, pre, acts, probs, loss)


def backward(model: Model, state: ForwardState, batch: MiniBatch) -> GradientUpdate:
    """Gradients of the mean loss w.r.t. every dense weight and bias."""
    n = batch.size
    d_act = state.probabilities.copy()
    d_act[np.arange(n), batch.labels] -= 1.0
    d_act /= n

    grads: list[LayerGrad | None] = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            dz = d_act * (state.pre_activations[k] > 0.0)
        else:
            dz = d_act
        grads[k] = LayerGrad(dz.T @ state.activations[k], dz.sum(axis=0))
        if k:
            d_act = dz @ layer.weights
    return GradientUpdate(list(grads), batch_size=n)  # type: ignore[arg-type]


def per_layer_l2_norm(update: GradientUpdate) -> list[float]:
    """Joint L2 norm of (weight grad, bias grad) for each layer."""
    out = []
    for g in update.layers:
        sq = float(np.dot(g.weights.ravel(), g.weights.ravel()) + np.dot(g.bias, g.bias))
        out.append(np.sqrt(sq))
    return out


# ---------------------------------------------------------------------------
# Update arithmetic (plumbing shared by aggregation and the attack toolkit)

def zeros_update(model: Model, batch_size: int = 0) -> GradientUpdate:
    return GradientUpdate(
        [LayerGrad(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers],
        batch_size,
    )


def constant_update(model: Model, value: float, batch_size: int = 0) -> GradientUpdate:
    return GradientUpdate(
        [
            LayerGrad(np.full_like(l.weights, value), np.full_like(l.bias, value))
            for l in model.layers
        ],
        batch_size,
    )


def add_updates(a: GradientUpdate, b: GradientUpdate) -> GradientUpdate:
    _check_same_shape(a, b)
    return GradientUpdate(
        [
            LayerGrad(ga.weights + gb.weights, ga.bias + gb.bias)
            for ga, gb in zip(a.layers, b.layers)
        ],
        a.batch_size + b.batch_size,
    )


def subtract_updates(a: GradientUpdate, b: GradientUpdate) -> GradientUpdate:
    _check_same_shape(a, b)
    return GradientUpdate(
        [
            LayerGrad(ga.weights - gb.weights, ga.bias - gb.bias)
            for ga, gb in zip(a.layers, b.layers)
        ],
        a.batch_size,
    )


def scale_update(a: GradientUpdate, factor: float) -> GradientUpdate:
    return GradientUpdate(
        [LayerGrad(g.weights * factor, g.bias * factor) for g in a.layers],
        a.batch_size,
    )


def update_size(update: GradientUpdate) -> int:
    return sum(g.weights.size + g.bias.size for g in update.layers)


def flatten_update(update: GradientUpdate) -> np.ndarray:
    parts = []
    for g in update.layers:
        parts.append(g.weights.ravel())
        parts.append(g.bias)
    return np.concatenate(parts)


def unflatten_update(vec: np.ndarray, template: GradientUpdate, batch_size: int = 0) -> GradientUpdate:
    layers = []
    at = 0
    for g in template.layers:
        w = vec[at : at + g.weights.size].reshape(g.weights.shape).copy()
        at += g.weights.size
        b = vec[at : at + g.bias.size].copy()
        at += g.bias.size
        layers.append(LayerGrad(w, b))
    if at != vec.size:
        raise ConfigurationError("flat vector length does not match update shape")
    return GradientUpdate(layers, batch_size)


def _check_same_shape(a: GradientUpdate, b: GradientUpdate) -> None:
    if len(a.layers) != len(b.layers) or any(
        ga.weights.shape != gb.weights.shape or ga.bias.shape != gb.bias.shape
        for ga, gb in zip(a.layers, b.layers)
    ):
        raise ConfigurationError("gradient updates have mismatched shapes")


# ---------------------------------------------------------------------------
# Standard initialization

def init_dense(in_dim: int, out_dim: int, activation: str, rng: RngStream) -> DenseLayer:
    """He-normal for ReLU layers, Glorot-uniform for linear/classification."""
    gen = rng.generator()
    if activation == "relu":
        w = gen.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
    else:
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = gen.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(w, np.zeros(out_dim), activation)


def build_mlp(
    input_dim: int,
    hidden: Sequence[int],
    classes: int,
    rng: RngStream,
    embedding: EmbeddingLayer | None = None,
) -> Model:
    """ReLU hidden stack plus a linear classification layer."""
    dims = [input_dim, *hidden]
    layers = [
        init_dense(dims[i], dims[i + 1], "relu", rng.child("layer", i))
        for i in range(len(dims) - 1)
    ]
    layers.append(init_dense(dims[-1], classes, "identity", rng.child("layer", len(dims) - 1)))
    return Model(layers, embedding)
