"""Dense feed-forward classifiers stored as flat parameter vectors.

All model arithmetic in the federated protocol (composition, averaging,
distance-based adaptation) happens directly on these vectors, so the layout
is fixed: for every layer, the weight matrix (in x out, row-major) followed
by its bias vector. Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

ACTIVATIONS = ("relu",)


class ShapeMismatchError(ValueError):
    """Input dimensions do not match what a ModelSpec expects."""

    def __init__(self, what: str, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


@dataclass(frozen=True)
class ModelSpec:
    """MLP architecture: (input_dim, hidden dims..., class_count)."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output dim")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"layer_dims entries must be >= 1, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    @property
    def last_hidden_dim(self) -> int:
        return self.layer_dims[-2]

    @property
    def layer_pairs(self) -> tuple[tuple[int, int], ...]:
        dims = self.layer_dims
        return tuple((dims[i], dims[i + 1]) for i in range(len(dims) - 1))

    @property
    def total_params(self) -> int:
        return sum(din * dout + dout for din, dout in self.layer_pairs)

    def classifier_weight_slice(self) -> slice:
        """Flat slice holding the final layer's weight matrix (bias excluded)."""
        din, dout = self.layer_pairs[-1]
        start = self.total_params - (din * dout + dout)
        return slice(start, start + din * dout)


@dataclass
class ParamVector:
    """Flat float64 parameter array tied to the ModelSpec that interprets it."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.total_params,):
            raise ShapeMismatchError(
                "parameter vector shape", (self.spec.total_params,), self.values.shape
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (weight, bias) views into the flat array, one pair per layer."""
        offset = 0
        for din, dout in self.spec.layer_pairs:
            w = self.values[offset : offset + din * dout].reshape(din, dout)
            offset += din * dout
            b = self.values[offset : offset + dout]
            offset += dout
            yield w, b


@dataclass
class Batch:
    """A block of labeled samples: inputs (n x d), integer labels (n,)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ShapeMismatchError("batch input rank", 2, self.inputs.ndim)
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeMismatchError(
                "batch labels shape", (self.inputs.shape[0],), self.labels.shape
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, fully determined by the seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for din, dout in spec.layer_pairs:
        bound = math.sqrt(6.0 / (din + dout))
        chunks.append(rng.uniform(-bound, bound, size=din * dout))
        chunks.append(np.zeros(dout))
    return ParamVector(np.concatenate(chunks), spec)


def forward(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Logits for a batch of input rows; a pure function of (params, inputs)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ShapeMismatchError("input rank", 2, inputs.ndim)
    if inputs.shape[1] != params.spec.input_dim:
        raise ShapeMismatchError("input width", params.spec.input_dim, inputs.shape[1])
    layers = list(params.layers())
    h = inputs
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = layers[-1]
    return h @ w + b


def softmax_temp(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax over the last axis, max-subtracted for stability."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(params: ParamVector, batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("batch is empty")
    classes = params.spec.class_count
    if batch.labels.min() < 0 or batch.labels.max() >= classes:
        raise ValueError(
            f"labels must lie in [0, {classes}), got range "
            f"[{batch.labels.min()}, {batch.labels.max()}]"
        )


def cross_entropy_loss(params: ParamVector, batch: Batch) -> float:
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    _check_labels(params, batch)
    logits = forward(params, batch.inputs)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(batch)), batch.labels]
    return float(np.mean(log_norm - picked))


def cross_entropy_grad(params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Mean cross-entropy loss and its analytic gradient over the batch."""
    _check_labels(params, batch)
    inputs = batch.inputs
    if inputs.shape[1] != params.spec.input_dim:
        raise ShapeMismatchError("input width", params.spec.input_dim, inputs.shape[1])

    layers = list(params.layers())
    acts = [inputs]  # input fed to each layer
    pre = []  # pre-activation of each layer
    h = inputs
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)

    n = len(batch)
    logits = pre[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(
        np.mean(np.log(exp.sum(axis=1)) - shifted[np.arange(n), batch.labels])
    )

    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            # ReLU subgradient at 0 taken as 0
            delta = (delta @ w.T) * (pre[i - 1] > 0.0)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, ParamVector(flat, params.spec)


def sgd_train(
    params: ParamVector,
    data: Batch,
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    rng_seed: int,
) -> ParamVector:
    """Mini-batch SGD with momentum; returns new parameters, input untouched.

    Shuffling and batching order are derived entirely from rng_seed and the
    momentum buffer starts at zero on every call, so the result is a pure
    function of the arguments. Velocity update: v <- momentum*v + grad,
    params <- params - lr*v.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(data) == 0:
        raise ValueError("data source is empty")

    rng = np.random.default_rng(rng_seed)
    values = params.values.copy()
    current = ParamVector(values, params.spec)
    velocity = np.zeros_like(values)
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grad = cross_entropy_grad(
                current, Batch(data.inputs[idx], data.labels[idx])
            )
            velocity *= momentum
            velocity += grad.values
            values -= lr * velocity
    return ParamVector(values, params.spec)


def evaluate(params: ParamVector, data: Batch) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if len(data) == 0:
        raise ValueError("data source is empty")
    preds = np.argmax(forward(params, data.inputs), axis=1)
    return float(np.mean(preds == data.labels))


def weighted_mean_params(
    params: Sequence[ParamVector], weights: Sequence[float]
) -> ParamVector:
    """Convex combination of parameter vectors, weights normalized to sum 1.

    Anchored at the first vector so that averaging identical models returns
    them bit-for-bit.
    """
    if len(params) == 0:
        raise ValueError("nothing to average")
    if len(params) != len(weights):
        raise ShapeMismatchError("weight count", len(params), len(weights))
    total = float(sum(weights))
    if total <= 0:
        raise ValueError(f"weights must sum to a positive total, got {total}")
    spec = params[0].spec
    anchor = params[0].values
    acc = np.zeros_like(anchor)
    for p, w in zip(params, weights):
        if p.spec != spec:
            raise ShapeMismatchError("model spec", spec, p.spec)
        acc += (w / total) * (p.values - anchor)
    return ParamVector(anchor + acc, spec)
