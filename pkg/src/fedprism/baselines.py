"""Reference algorithms sharing the nn/data stack: local-only training,
FedAvg, and IFCA. Each exposes a round function with the same shape the
harness uses for the prism protocol."""

from __future__ import annotations

import numpy as np

from .client import ClientData
from .config import TrainConfig
from .nn import ParamVector, cross_entropy_loss, sgd_train, weighted_mean_params
from .seeding import derive_seed


def _fit(
    params: ParamVector, data: ClientData, train: TrainConfig, seed: int
) -> ParamVector:
    return sgd_train(
        params, data.train, train.epochs, train.lr, train.momentum, train.batch_size, seed
    )


def local_round(
    models: list[ParamVector],
    data: list[ClientData],
    sampled_ids: list[int],
    train: TrainConfig,
    round_seed: int,
) -> list[ParamVector]:
    """Each sampled client trains its own model; nothing is ever aggregated."""
    updated = list(models)
    for cid in sorted(sampled_ids):
        updated[cid] = _fit(models[cid], data[cid], train, derive_seed(round_seed, cid))
    return updated


def fedavg_round(
    global_model: ParamVector,
    data: list[ClientData],
    sampled_ids: list[int],
    train: TrainConfig,
    round_seed: int,
) -> ParamVector:
    """Sampled clients each train a copy of the global model; the server
    returns the sample-size-weighted average of the results."""
    if not sampled_ids:
        raise ValueError("round sampled no clients")
    trained, sizes = [], []
    for cid in sorted(sampled_ids):
        trained.append(_fit(global_model, data[cid], train, derive_seed(round_seed, cid)))
        sizes.append(len(data[cid].train))
    return weighted_mean_params(trained, sizes)


def select_cluster(losses: list[float] | np.ndarray) -> int:
    """IFCA model choice: lowest mean training loss, ties to the lowest index."""
    return int(np.argmin(np.asarray(losses)))


def ifca_selection(models: list[ParamVector], data: ClientData) -> int:
    """Which of the cluster models fits this client's training data best."""
    return select_cluster([cross_entropy_loss(m, data.train) for m in models])


def ifca_round(
    models: list[ParamVector],
    data: list[ClientData],
    sampled_ids: list[int],
    train: TrainConfig,
    round_seed: int,
) -> tuple[list[ParamVector], dict[int, int]]:
    """Every sampled client evaluates all cluster models on its training data,
    trains the lowest-loss one, and the server averages updates per model
    index (weighted by sample count). Unselected models stay untouched.
    Returns the new models and each sampled client's selection.
    """
    if len(models) < 2:
        raise ValueError("IFCA needs at least 2 cluster models")
    if not sampled_ids:
        raise ValueError("round sampled no clients")
    per_model: dict[int, list[ParamVector]] = {k: [] for k in range(len(models))}
    per_sizes: dict[int, list[int]] = {k: [] for k in range(len(models))}
    selections: dict[int, int] = {}
    for cid in sorted(sampled_ids):
        k = ifca_selection(models, data[cid])
        selections[cid] = k
        per_model[k].append(_fit(models[k], data[cid], train, derive_seed(round_seed, cid)))
        per_sizes[k].append(len(data[cid].train))
    updated = []
    for k, model in enumerate(models):
        if per_model[k]:
            updated.append(weighted_mean_params(per_model[k], per_sizes[k]))
        else:
            updated.append(model)
    return updated, selections
