"""Client-side protocol: dual-path local training, prototype extraction,
and confidence-routed dual-stream inference.

Each client maintains two never-shared models (the private composition
component and an independent local specialist) and, once per round, builds
and trains the composed backbone that goes back to the server.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ComponentMask, PrismHyperparams, TrainConfig
from .nn import (
    Batch,
    ParamVector,
    ShapeMismatchError,
    evaluate,
    forward,
    sgd_train,
    softmax_temp,
)
from .seeding import derive_seed

# sgd_train sub-seed offsets within a client's round seed
SPECIALIST_SEED = 0
PRIVATE_SEED = 1
BACKBONE_SEED = 2


@dataclass
class ClientData:
    """A client's materialized local train/test split."""

    train: Batch
    test: Batch


@dataclass
class ClientState:
    client_id: int
    private_params: ParamVector  # composition component, never leaves the client
    specialist: ParamVector  # independent local expert used at inference
    alpha: float  # global-component mixing weight
    assign_weights: np.ndarray  # soft cluster assignment, sums to 1
    data: ClientData

    def __post_init__(self):
        self.assign_weights = np.asarray(self.assign_weights, dtype=np.float64)
        if np.any(self.assign_weights < 0):
            raise ValueError("assignment weights must be nonnegative")
        if abs(self.assign_weights.sum() - 1.0) > 1e-9:
            raise ValueError(
                f"assignment weights must sum to 1, got {self.assign_weights.sum()!r}"
            )
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def train_size(self) -> int:
        return len(self.data.train)


@dataclass
class ClientRoundOutput:
    backbone: ParamVector  # locally trained composed model, returned to the server
    prototype: np.ndarray  # trained backbone's classifier weights
    train_size: int


def compose_backbone(
    alpha: float,
    global_model: ParamVector,
    beta: float,
    assign_weights: np.ndarray,
    cluster_models: list[ParamVector],
    private_params: ParamVector,
) -> ParamVector:
    """Convex composition: alpha*global + beta*(soft cluster mix) + rest*private."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be >= 0, got {alpha}, {beta}")
    if alpha + beta > 1 + 1e-12:
        raise ValueError(f"alpha + beta must not exceed 1, got {alpha} + {beta}")
    assign_weights = np.asarray(assign_weights, dtype=np.float64)
    if len(assign_weights) != len(cluster_models):
        raise ShapeMismatchError("assignment weight count", len(cluster_models), len(assign_weights))
    if abs(assign_weights.sum() - 1.0) > 1e-6:
        raise ValueError(f"assignment weights must sum to 1, got {assign_weights.sum()!r}")
    spec = global_model.spec
    for model in (*cluster_models, private_params):
        if model.spec != spec:
            raise ShapeMismatchError("model spec", spec, model.spec)
    mixture = np.zeros_like(global_model.values)
    for w, cluster in zip(assign_weights, cluster_models):
        mixture += w * cluster.values
    values = (
        alpha * global_model.values
        + beta * mixture
        + (1.0 - alpha - beta) * private_params.values
    )
    return ParamVector(values, spec)


def effective_coefficients(
    alpha: float, beta: float, mask: ComponentMask
) -> tuple[float, float]:
    """Composition coefficients after an ablation mask.

    Disabled components get coefficient zero and the survivors are rescaled
    to sum to 1. If every surviving coefficient is zero (say, global-only at
    alpha=0) the enabled components share the mass uniformly.
    """
    if mask.all_on:
        return alpha, beta
    enabled = np.array(
        [mask.use_global, mask.use_cluster, mask.use_private], dtype=np.float64
    )
    parts = enabled * np.array([alpha, beta, 1.0 - alpha - beta])
    total = parts.sum()
    if total <= 1e-12:
        parts = enabled / enabled.sum()
        total = 1.0
    parts = parts / total
    return float(parts[0]), float(parts[1])


def extract_prototype(params: ParamVector) -> np.ndarray:
    """Final-layer weight matrix (bias excluded), flattened row-major."""
    return params.values[params.spec.classifier_weight_slice()].copy()


def client_update(
    state: ClientState,
    global_model: ParamVector,
    cluster_models: list[ParamVector],
    hp: PrismHyperparams,
    train: TrainConfig,
    round_seed: int,
) -> tuple[ClientRoundOutput, ClientState]:
    """One round of local work.

    The specialist and the private component train on local data only (they
    never see server state); then the backbone is composed from the fresh
    private component and trained. Returns the server-bound output and the
    successor client state; the input state is not mutated.
    """
    data = state.data.train

    def fit(params: ParamVector, offset: int) -> ParamVector:
        return sgd_train(
            params,
            data,
            train.epochs,
            train.lr,
            train.momentum,
            train.batch_size,
            derive_seed(round_seed, offset),
        )

    specialist = fit(state.specialist, SPECIALIST_SEED)
    private = fit(state.private_params, PRIVATE_SEED)
    alpha_eff, beta_eff = effective_coefficients(state.alpha, hp.beta, hp.component_mask)
    backbone = compose_backbone(
        alpha_eff, global_model, beta_eff, state.assign_weights, cluster_models, private
    )
    backbone = fit(backbone, BACKBONE_SEED)
    output = ClientRoundOutput(backbone, extract_prototype(backbone), len(data))
    return output, replace(state, specialist=specialist, private_params=private)


def route_inference(
    x: np.ndarray, specialist: ParamVector, backbone: ParamVector, temperature: float
) -> tuple[int, float, np.ndarray]:
    """Confidence-routed prediction for a single input row.

    The specialist's peak temperature-softmax probability becomes the fusion
    weight, so a confident specialist dominates and an uncertain one defers
    to the backbone. Returns (prediction, routing weight, fused logits).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    specialist_logits = forward(specialist, x)[0]
    weight = float(softmax_temp(specialist_logits, temperature).max())
    backbone_logits = forward(backbone, x)[0]
    fused = weight * specialist_logits + (1.0 - weight) * backbone_logits
    return int(np.argmax(fused)), weight, fused


def routed_accuracy(
    test: Batch,
    specialist: ParamVector,
    backbone: ParamVector,
    temperature: float,
    weight_override: float | None = None,
) -> float:
    """Accuracy of dual-stream routing over a test batch.

    A weight override replaces the per-input confidence weight with a fixed
    value (0 = backbone only, 1 = specialist only).
    """
    if len(test) == 0:
        raise ValueError("test batch is empty")
    specialist_logits = forward(specialist, test.inputs)
    backbone_logits = forward(backbone, test.inputs)
    if weight_override is None:
        weight = softmax_temp(specialist_logits, temperature).max(axis=1, keepdims=True)
    else:
        if not 0 <= weight_override <= 1:
            raise ValueError(f"weight override must lie in [0, 1], got {weight_override}")
        weight = np.full((len(test), 1), float(weight_override))
    fused = weight * specialist_logits + (1.0 - weight) * backbone_logits
    preds = np.argmax(fused, axis=1)
    return float(np.mean(preds == test.labels))


def client_evaluate(
    state: ClientState,
    global_model: ParamVector,
    cluster_models: list[ParamVector],
    hp: PrismHyperparams,
    iid_test: Batch,
) -> tuple[float, float]:
    """Local routed accuracy on the client's own test split, plus the freshly
    recomposed backbone's accuracy on the shared IID test set.

    Clients without test samples report NaN local accuracy.
    """
    alpha_eff, beta_eff = effective_coefficients(state.alpha, hp.beta, hp.component_mask)
    backbone = compose_backbone(
        alpha_eff,
        global_model,
        beta_eff,
        state.assign_weights,
        cluster_models,
        state.private_params,
    )
    if len(state.data.test) > 0:
        local_acc = routed_accuracy(
            state.data.test,
            state.specialist,
            backbone,
            hp.temperature,
            hp.inference_weight_override,
        )
    else:
        local_acc = float("nan")
    return local_acc, evaluate(backbone, iid_test)
