"""Server-side protocol: weighted global aggregation, soft moving-average
cluster updates, cosine K-means re-clustering with warmup, similarity-softmax
assignment, and mixing-weight adaptation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .client import ClientData, ClientRoundOutput, ClientState, client_update, extract_prototype
from .config import PrismHyperparams, TrainConfig
from .nn import ModelSpec, ParamVector, init_params, softmax_temp, weighted_mean_params
from .seeding import derive_seed

# Floating-point-safe reading of the strict Z_k > 0 guard.
ZERO_MASS = 1e-12

# Server-side sub-seed offset within a round seed (client paths use 0-2).
KMEANS_SEED = 3


@dataclass
class ServerState:
    global_model: ParamVector
    cluster_models: list[ParamVector]
    centroids: list[np.ndarray]
    round: int
    hp: PrismHyperparams
    reclusterings: int = 0  # assignments stay frozen until the first K-means

    def __post_init__(self):
        if len(self.cluster_models) != self.hp.n_clusters:
            raise ValueError(
                f"expected {self.hp.n_clusters} cluster models, got {len(self.cluster_models)}"
            )
        if len(self.centroids) != self.hp.n_clusters:
            raise ValueError(
                f"expected {self.hp.n_clusters} centroids, got {len(self.centroids)}"
            )
        for model in self.cluster_models:
            if model.spec != self.global_model.spec:
                raise ValueError("cluster models must share the global model's spec")


def init_server(spec: ModelSpec, hp: PrismHyperparams, seed: int) -> ServerState:
    """Fresh server state: seeded global model, clusters as perturbed copies
    of it (identical clusters would make the assignment softmax degenerate),
    centroids seeded from the initial cluster prototypes."""
    global_model = init_params(spec, derive_seed(seed, 0))
    clusters = []
    for k in range(hp.n_clusters):
        rng = np.random.default_rng(derive_seed(seed, 1, k))
        noise = hp.cluster_init_sigma * rng.standard_normal(spec.total_params)
        clusters.append(ParamVector(global_model.values + noise, spec))
    centroids = [extract_prototype(c) for c in clusters]
    return ServerState(global_model, clusters, centroids, round=0, hp=hp)


def init_client(
    client_id: int, spec: ModelSpec, hp: PrismHyperparams, data: ClientData, seed: int
) -> ClientState:
    """Fresh client: seeded private/specialist models, uniform assignment."""
    private = init_params(spec, derive_seed(seed, 2, client_id))
    specialist = init_params(spec, derive_seed(seed, 3, client_id))
    alpha = hp.init_alpha if hp.alpha_override is None else hp.alpha_override
    weights = np.full(hp.n_clusters, 1.0 / hp.n_clusters)
    return ClientState(client_id, private, specialist, alpha, weights, data)


def aggregate_global(outputs: list[ClientRoundOutput]) -> ParamVector:
    """Sample-size-weighted mean of the returned backbones."""
    if not outputs:
        raise ValueError("cannot aggregate an empty round")
    return weighted_mean_params(
        [o.backbone for o in outputs], [o.train_size for o in outputs]
    )


def update_clusters(
    cluster_models: list[ParamVector],
    outputs: list[ClientRoundOutput],
    assign_matrix: np.ndarray,
    eta_cluster: float,
) -> list[ParamVector]:
    """Move each cluster model toward the soft-weighted mean of the backbones
    assigned to it; clusters with no assignment mass stay untouched."""
    assign_matrix = np.asarray(assign_matrix, dtype=np.float64)
    if assign_matrix.shape != (len(outputs), len(cluster_models)):
        raise ValueError(
            f"assignment matrix shape {assign_matrix.shape} does not match "
            f"{len(outputs)} clients x {len(cluster_models)} clusters"
        )
    if not 0 < eta_cluster <= 1:
        raise ValueError(f"eta_cluster must lie in (0, 1], got {eta_cluster}")
    updated = []
    for k, model in enumerate(cluster_models):
        mass = float(assign_matrix[:, k].sum())
        if mass <= ZERO_MASS:
            updated.append(model)
            continue
        target = np.zeros_like(model.values)
        for weight, output in zip(assign_matrix[:, k], outputs):
            target += (weight / mass) * output.backbone.values
        values = model.values + eta_cluster * (target - model.values)
        updated.append(ParamVector(values, model.spec))
    return updated


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > ZERO_MASS else v.copy()


def cosine_matrix(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities; zero-norm vectors get similarity 0."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    p_norm = np.linalg.norm(points, axis=1, keepdims=True)
    c_norm = np.linalg.norm(centers, axis=1, keepdims=True)
    sims = (points @ centers.T) / np.where(p_norm > ZERO_MASS, p_norm, 1.0)
    sims /= np.where(c_norm > ZERO_MASS, c_norm, 1.0).T
    sims[(p_norm <= ZERO_MASS).ravel(), :] = 0.0
    sims[:, (c_norm <= ZERO_MASS).ravel()] = 0.0
    return sims


def _kmeans_cosine_once(
    points: np.ndarray, n_clusters: int, seed: int, max_iters: int
) -> np.ndarray:
    n = len(points)
    rng = np.random.default_rng(seed)
    centers = np.empty((n_clusters, points.shape[1]))
    centers[0] = _unit(points[int(rng.integers(n))])
    for j in range(1, n_clusters):
        best_sim = cosine_matrix(points, centers[:j]).max(axis=1)
        weight = np.clip(1.0 - best_sim, 0.0, None)
        if weight.sum() <= ZERO_MASS:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=weight / weight.sum()))
        centers[j] = _unit(points[idx])

    labels = None
    for _ in range(max_iters):
        new_labels = cosine_matrix(points, centers).argmax(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(n_clusters):
            members = points[labels == k]
            if len(members) > 0:
                centers[k] = _unit(members.mean(axis=0))
            else:
                loneliest = int(cosine_matrix(points, centers).max(axis=1).argmin())
                centers[k] = _unit(points[loneliest])
    return centers


def kmeans_cosine(
    prototypes: list[np.ndarray],
    n_clusters: int,
    seed: int,
    max_iters: int = 50,
    n_init: int = 8,
) -> list[np.ndarray]:
    """Cosine-similarity K-means over prototype vectors.

    Seeded k-means++-style init (new centers drawn with probability
    proportional to one minus their best similarity to the chosen centers),
    argmax-similarity assignment, centroids re-normalized after every mean.
    An emptied centroid is reseeded to the prototype least similar to all
    current centroids. Each restart iterates until assignments stabilize or
    max_iters; the run with the highest mean best-similarity wins (single
    inits fall into poor local optima often enough to destabilize cluster
    recovery). All randomness derives from `seed`.
    """
    if not prototypes:
        raise ValueError("prototypes must be nonempty")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    points = np.stack([np.asarray(p, dtype=np.float64) for p in prototypes])
    if len(np.unique(points, axis=0)) < n_clusters:
        warnings.warn(
            "fewer distinct prototypes than clusters; duplicate centroids are possible",
            RuntimeWarning,
        )

    best_centers = None
    best_objective = -np.inf
    for restart in range(n_init):
        centers = _kmeans_cosine_once(
            points, n_clusters, derive_seed(seed, restart), max_iters
        )
        objective = float(cosine_matrix(points, centers).max(axis=1).mean())
        if objective > best_objective:
            best_objective = objective
            best_centers = centers
    return [best_centers[k].copy() for k in range(n_clusters)]


def match_centroid_identity(
    new_centroids: list[np.ndarray], previous: list[np.ndarray]
) -> list[np.ndarray]:
    """Reorder freshly clustered centroids to line up with the previous set.

    K-means labels its output arbitrarily; without matching, every
    re-clustering would hand each cluster model a different client group and
    strand unsampled clients' assignments on an obsolete index order. Greedy
    best-pair matching on cosine similarity keeps identities stable.
    """
    if len(new_centroids) != len(previous):
        raise ValueError("centroid counts differ")
    k = len(previous)
    sims = cosine_matrix(np.stack(new_centroids), np.stack(previous))
    order: list[int | None] = [None] * k
    taken_new: set[int] = set()
    taken_old: set[int] = set()
    flat = sorted(
        ((sims[i, j], i, j) for i in range(k) for j in range(k)),
        key=lambda triple: (-triple[0], triple[1], triple[2]),
    )
    for _, new_i, old_j in flat:
        if new_i in taken_new or old_j in taken_old:
            continue
        order[old_j] = new_i
        taken_new.add(new_i)
        taken_old.add(old_j)
    return [new_centroids[i] for i in order]


def soft_assign(prototype: np.ndarray, centroids: list[np.ndarray], tau: float) -> np.ndarray:
    """Softmax over cosine similarities between a prototype and each centroid."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    sims = cosine_matrix(np.asarray(prototype)[None, :], np.stack(centroids))[0]
    return softmax_temp(sims, tau)


def update_alpha(
    alpha: float,
    backbone: ParamVector,
    cluster_model: ParamVector,
    global_model: ParamVector,
    eta_alpha: float,
    beta: float,
) -> float:
    """Adapt the mixing weight by the trained backbone's distance gap.

    The gap is ||backbone - cluster|| - ||backbone - global||: positive when
    the backbone landed nearer the global model, pushing alpha up. Clipped to
    [0, 1] and then to [0, 1 - beta] so the private coefficient stays
    nonnegative.
    """
    if eta_alpha <= 0:
        raise ValueError(f"eta_alpha must be positive, got {eta_alpha}")
    gap = float(
        np.linalg.norm(backbone.values - cluster_model.values)
        - np.linalg.norm(backbone.values - global_model.values)
    )
    clipped = float(np.clip(alpha + eta_alpha * gap, 0.0, 1.0))
    return min(clipped, 1.0 - beta)


def server_round(
    state: ServerState,
    sampled: list[ClientState],
    train: TrainConfig,
    round_seed: int,
) -> tuple[ServerState, list[ClientState]]:
    """Run one protocol round over the sampled clients.

    Clients run in ascending id order so results are order-independent of the
    caller. Aggregation and the cluster/alpha updates use the clients'
    pre-round assignment weights and the pre-round global/cluster models;
    re-clustering fires once the 1-based round index clears the warmup and
    hits the recluster cadence, and sampled clients are (re)assigned against
    the current centroids on every round after the first K-means. Unsampled
    clients keep their assignments and mixing weights bitwise.
    """
    if not sampled:
        raise ValueError("round sampled no clients")
    hp = state.hp
    this_round = state.round + 1
    ordered = sorted(sampled, key=lambda c: c.client_id)

    outputs: list[ClientRoundOutput] = []
    updated: list[ClientState] = []
    for client in ordered:
        output, next_client = client_update(
            client,
            state.global_model,
            state.cluster_models,
            hp,
            train,
            derive_seed(round_seed, client.client_id),
        )
        outputs.append(output)
        updated.append(next_client)

    prev_global = state.global_model
    prev_clusters = state.cluster_models
    prev_assign = np.stack([c.assign_weights for c in ordered])

    new_global = aggregate_global(outputs)
    new_clusters = update_clusters(prev_clusters, outputs, prev_assign, hp.eta_cluster)

    centroids = state.centroids
    reclusterings = state.reclusterings
    if this_round > hp.warmup_rounds and this_round % hp.recluster_every == 0:
        centroids = kmeans_cosine(
            [o.prototype for o in outputs],
            hp.n_clusters,
            derive_seed(round_seed, KMEANS_SEED),
            hp.kmeans_max_iters,
        )
        centroids = match_centroid_identity(centroids, state.centroids)
        reclusterings += 1

    for i, client in enumerate(updated):
        if reclusterings > 0:
            weights = soft_assign(outputs[i].prototype, centroids, hp.tau)
        else:
            weights = client.assign_weights
        if hp.alpha_override is None:
            nearest = int(np.argmax(prev_assign[i]))  # ties -> lowest index
            alpha = update_alpha(
                client.alpha,
                outputs[i].backbone,
                prev_clusters[nearest],
                prev_global,
                hp.eta_alpha,
                hp.beta,
            )
        else:
            alpha = client.alpha
        updated[i] = replace(client, assign_weights=weights, alpha=alpha)

    new_state = replace(
        state,
        global_model=new_global,
        cluster_models=new_clusters,
        centroids=centroids,
        round=this_round,
        reclusterings=reclusterings,
    )
    return new_state, updated
