"""Experiment orchestration: data construction, the round loop, per-round
evaluation, CSV/JSON reporting, and the ablation sweeps.

Reports are deterministic functions of the experiment config: every random
choice (data, partition, model init, client sampling, local shuffling) flows
from the single master seed. Wall-clock timings are kept out of the CSV and
segregated under a "timing" key in the JSON summary so report files can be
compared byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines
from .client import ClientData, ClientState, client_evaluate
from .config import PrismHyperparams, TrainConfig
from .data import (
    DataBundle,
    Partition,
    SyntheticConfig,
    dirichlet_partition,
    generate_synthetic,
    load_idx,
    pathological_partition,
    with_class_count,
)
from .nn import Batch, ModelSpec, ParamVector, evaluate, init_params
from .seeding import derive_seed
from .server import ServerState, init_client, init_server, server_round

ALGORITHMS = ("fedprism", "fedavg", "ifca", "local")

CSV_HEADER = "round,global_acc,mean_local_acc,assignment_entropy,alpha_mean,alpha_min,alpha_max"

# Sub-seed tags under the master seed; client/server round internals use 0-3.
DATA_SEED = 101
PARTITION_SEED = 102
MODEL_SEED = 103
SAMPLE_SEED = 104
ROUND_SEED = 105


@dataclass(frozen=True)
class IdxPaths:
    """IDX file quadruple for an FMNIST-style dataset."""

    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass(frozen=True)
class PartitionConfig:
    """How the dataset is split across clients.

    scheme "synthetic" reuses the generator's natural per-group split (only
    valid for synthetic datasets); "dirichlet" and "pathological" re-partition
    any dataset. n_clients defaults to the synthetic generator's client count
    and must be given for IDX datasets; seed None derives from the master.
    """

    scheme: str = "synthetic"
    alpha: float = 0.5
    shards_per_client: int = 2
    n_clients: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.scheme not in ("synthetic", "dirichlet", "pathological"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.alpha <= 0:
            raise ValueError("partition alpha must be positive")
        if self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")
        if self.n_clients is not None and self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    algorithm: str = "fedprism"
    dataset: SyntheticConfig | IdxPaths = SyntheticConfig()
    partition: PartitionConfig = PartitionConfig()
    hidden_dims: tuple[int, ...] = (64, 32)
    rounds: int = 40
    client_fraction: float = 0.2
    eval_every: int = 1
    seed: int = 0
    train: TrainConfig = TrainConfig()
    prism: PrismHyperparams = PrismHyperparams()
    ifca_clusters: int = 5

    def __post_init__(self):
        if not self.name:
            raise ValueError("name must be nonempty")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.client_fraction <= 1:
            raise ValueError("client_fraction must lie in (0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("hidden_dims entries must be >= 1")
        if self.algorithm == "ifca" and self.ifca_clusters < 2:
            raise ValueError("ifca_clusters must be >= 2")
        if self.partition.scheme == "synthetic" and not isinstance(self.dataset, SyntheticConfig):
            raise ValueError("partition scheme 'synthetic' requires a synthetic dataset")


@dataclass
class RoundReport:
    round: int
    global_acc: float
    mean_local_acc: float
    per_client_local_acc: list[float]
    assignment_entropy: float
    alpha_mean: float
    alpha_min: float
    alpha_max: float
    wall_time: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    final_assignments: list[int] | None  # prism argmax assignment / ifca selection
    final_alphas: list[float] | None
    true_clusters: list[int] | None
    total_time: float

    @property
    def final(self) -> RoundReport:
        return self.reports[-1]

    @property
    def best_global(self) -> float:
        return max(r.global_acc for r in self.reports)

    @property
    def best_local(self) -> float:
        return max(r.mean_local_acc for r in self.reports)


def build_data(config: ExperimentConfig) -> tuple[DataBundle, np.ndarray | None, Partition]:
    """Materialize the configured dataset and partition.

    Ground-truth cluster labels are only meaningful for the synthetic
    generator's own partition; re-partitioned data returns None.
    """
    part = config.partition
    part_seed = part.seed if part.seed is not None else derive_seed(config.seed, PARTITION_SEED)

    if isinstance(config.dataset, SyntheticConfig):
        ds = config.dataset
        if ds.seed is None:
            ds = replace(ds, seed=derive_seed(config.seed, DATA_SEED))
        bundle, truth, natural = generate_synthetic(ds)
        if part.scheme == "synthetic":
            return bundle, truth, natural
        n_clients = part.n_clients if part.n_clients is not None else ds.n_clients
    else:
        train = load_idx(config.dataset.train_images, config.dataset.train_labels)
        test = load_idx(config.dataset.test_images, config.dataset.test_labels)
        classes = max(train.class_count, test.class_count)
        bundle = DataBundle(with_class_count(train, classes), with_class_count(test, classes))
        if part.n_clients is None:
            raise ValueError("partition.n_clients is required for IDX datasets")
        n_clients = part.n_clients

    if part.scheme == "dirichlet":
        partition = dirichlet_partition(bundle, n_clients, part.alpha, part_seed)
    else:
        partition = pathological_partition(bundle, n_clients, part.shards_per_client, part_seed)
    return bundle, None, partition


def client_splits(bundle: DataBundle, partition: Partition) -> list[ClientData]:
    return [
        ClientData(
            Batch(bundle.train.inputs[trn], bundle.train.labels[trn]),
            Batch(bundle.test.inputs[tst], bundle.test.labels[tst]),
        )
        for trn, tst in zip(partition.client_train, partition.client_test)
    ]


def sample_clients(n_clients: int, fraction: float, seed: int) -> list[int]:
    """ceil(fraction * N) distinct client ids, seeded, ascending."""
    count = min(n_clients, math.ceil(fraction * n_clients))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_clients, size=count, replace=False))


def assignment_entropy(weights: np.ndarray) -> float:
    """Shannon entropy (nats) of a soft assignment; 0 log 0 counts as 0."""
    w = np.asarray(weights, dtype=np.float64)
    positive = w[w > 0]
    return float(-(positive * np.log(positive)).sum())


def _nanmean(values: list[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    return float(finite.mean()) if len(finite) else float("nan")


class _PrismRunner:
    def __init__(self, config: ExperimentConfig, spec: ModelSpec, data: list[ClientData]):
        base = derive_seed(config.seed, MODEL_SEED)
        self.train = config.train
        self.state: ServerState = init_server(spec, config.prism, base)
        self.clients: list[ClientState] = [
            init_client(i, spec, config.prism, d, base) for i, d in enumerate(data)
        ]

    def run_round(self, sampled_ids: list[int], round_seed: int) -> None:
        sampled = [self.clients[i] for i in sampled_ids]
        self.state, updated = server_round(self.state, sampled, self.train, round_seed)
        for client in updated:
            self.clients[client.client_id] = client

    def measure(self, iid_test: Batch) -> dict:
        locals_, globals_ = [], []
        for client in self.clients:
            local_acc, global_acc = client_evaluate(
                client, self.state.global_model, self.state.cluster_models, self.state.hp, iid_test
            )
            locals_.append(local_acc)
            globals_.append(global_acc)
        alphas = [c.alpha for c in self.clients]
        entropy = float(np.mean([assignment_entropy(c.assign_weights) for c in self.clients]))
        return {
            "global_acc": float(np.mean(globals_)),
            "mean_local_acc": _nanmean(locals_),
            "per_client_local_acc": locals_,
            "assignment_entropy": entropy,
            "alpha_mean": float(np.mean(alphas)),
            "alpha_min": float(np.min(alphas)),
            "alpha_max": float(np.max(alphas)),
        }

    def final_assignments(self) -> list[int]:
        return [int(np.argmax(c.assign_weights)) for c in self.clients]

    def final_alphas(self) -> list[float]:
        return [c.alpha for c in self.clients]


def _no_assignment_stats(globals_acc: float, locals_: list[float]) -> dict:
    return {
        "global_acc": globals_acc,
        "mean_local_acc": _nanmean(locals_),
        "per_client_local_acc": locals_,
        "assignment_entropy": 0.0,
        "alpha_mean": 0.0,
        "alpha_min": 0.0,
        "alpha_max": 0.0,
    }


def _local_accs(model_of: list[ParamVector], data: list[ClientData]) -> list[float]:
    return [
        evaluate(m, d.test) if len(d.test) else float("nan")
        for m, d in zip(model_of, data)
    ]


class _FedAvgRunner:
    def __init__(self, config: ExperimentConfig, spec: ModelSpec, data: list[ClientData]):
        self.train = config.train
        self.data = data
        self.global_model = init_params(spec, derive_seed(config.seed, MODEL_SEED, 0))

    def run_round(self, sampled_ids: list[int], round_seed: int) -> None:
        self.global_model = baselines.fedavg_round(
            self.global_model, self.data, sampled_ids, self.train, round_seed
        )

    def measure(self, iid_test: Batch) -> dict:
        locals_ = _local_accs([self.global_model] * len(self.data), self.data)
        return _no_assignment_stats(evaluate(self.global_model, iid_test), locals_)

    def final_assignments(self):
        return None

    def final_alphas(self):
        return None


class _LocalRunner:
    def __init__(self, config: ExperimentConfig, spec: ModelSpec, data: list[ClientData]):
        base = derive_seed(config.seed, MODEL_SEED)
        self.train = config.train
        self.data = data
        # same per-client init rule as the prism specialists, for comparability
        self.models = [init_params(spec, derive_seed(base, 3, i)) for i in range(len(data))]

    def run_round(self, sampled_ids: list[int], round_seed: int) -> None:
        self.models = baselines.local_round(
            self.models, self.data, sampled_ids, self.train, round_seed
        )

    def measure(self, iid_test: Batch) -> dict:
        globals_ = float(np.mean([evaluate(m, iid_test) for m in self.models]))
        return _no_assignment_stats(globals_, _local_accs(self.models, self.data))

    def final_assignments(self):
        return None

    def final_alphas(self):
        return None


class _IfcaRunner:
    def __init__(self, config: ExperimentConfig, spec: ModelSpec, data: list[ClientData]):
        base = derive_seed(config.seed, MODEL_SEED)
        self.train = config.train
        self.data = data
        # same perturbed-copy init rule as the prism cluster models
        anchor = init_params(spec, derive_seed(base, 0))
        sigma = config.prism.cluster_init_sigma
        self.models = []
        for k in range(config.ifca_clusters):
            rng = np.random.default_rng(derive_seed(base, 1, k))
            noise = sigma * rng.standard_normal(spec.total_params)
            self.models.append(ParamVector(anchor.values + noise, spec))

    def run_round(self, sampled_ids: list[int], round_seed: int) -> None:
        self.models, _ = baselines.ifca_round(
            self.models, self.data, sampled_ids, self.train, round_seed
        )

    def _selections(self) -> list[int]:
        return [baselines.ifca_selection(self.models, d) for d in self.data]

    def measure(self, iid_test: Batch) -> dict:
        selections = self._selections()
        global_by_model = {k: evaluate(self.models[k], iid_test) for k in set(selections)}
        globals_ = float(np.mean([global_by_model[k] for k in selections]))
        locals_ = _local_accs([self.models[k] for k in selections], self.data)
        return _no_assignment_stats(globals_, locals_)

    def final_assignments(self) -> list[int]:
        return self._selections()

    def final_alphas(self):
        return None


_RUNNERS = {
    "fedprism": _PrismRunner,
    "fedavg": _FedAvgRunner,
    "ifca": _IfcaRunner,
    "local": _LocalRunner,
}


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute the configured algorithm for the configured number of rounds,
    evaluating at the configured cadence (the last round always reports)."""
    started = time.perf_counter()
    bundle, truth, partition = build_data(config)
    data = client_splits(bundle, partition)
    spec = ModelSpec((bundle.train.inputs.shape[1], *config.hidden_dims, bundle.class_count))
    runner = _RUNNERS[config.algorithm](config, spec, data)
    iid_test = Batch(bundle.test.inputs, bundle.test.labels)

    reports: list[RoundReport] = []
    for this_round in range(1, config.rounds + 1):
        tick = time.perf_counter()
        sampled = sample_clients(
            len(data), config.client_fraction, derive_seed(config.seed, SAMPLE_SEED, this_round)
        )
        runner.run_round(sampled, derive_seed(config.seed, ROUND_SEED, this_round))
        if this_round % config.eval_every == 0 or this_round == config.rounds:
            metrics = runner.measure(iid_test)
            reports.append(
                RoundReport(round=this_round, wall_time=time.perf_counter() - tick, **metrics)
            )

    return ExperimentResult(
        config=config,
        reports=reports,
        final_assignments=runner.final_assignments(),
        final_alphas=runner.final_alphas(),
        true_clusters=truth.tolist() if truth is not None else None,
        total_time=time.perf_counter() - started,
    )


def write_rounds_csv(reports: list[RoundReport], path) -> None:
    """One row per report, fixed header, no timing fields."""
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            f"{r.round},{r.global_acc:.6f},{r.mean_local_acc:.6f},"
            f"{r.assignment_entropy:.6f},{r.alpha_mean:.6f},{r.alpha_min:.6f},{r.alpha_max:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def config_dict(config: ExperimentConfig) -> dict:
    doc = dataclasses.asdict(config)
    doc["dataset_kind"] = "synthetic" if isinstance(config.dataset, SyntheticConfig) else "idx"
    return _jsonable(doc)


def summary_dict(result: ExperimentResult) -> dict:
    """Deterministic summary (config echo, final/best metrics, per-client
    finals); wall-clock numbers live only under the "timing" key."""
    final = result.final
    return _jsonable(
        {
            "config": config_dict(result.config),
            "final": {
                "round": final.round,
                "global_acc": final.global_acc,
                "mean_local_acc": final.mean_local_acc,
                "assignment_entropy": final.assignment_entropy,
                "alpha_mean": final.alpha_mean,
                "alpha_min": final.alpha_min,
                "alpha_max": final.alpha_max,
            },
            "best": {"global_acc": result.best_global, "mean_local_acc": result.best_local},
            "per_client_local_acc": final.per_client_local_acc,
            "final_assignments": result.final_assignments,
            "final_alphas": result.final_alphas,
            "timing": {"total_sec": result.total_time},
        }
    )


def write_summary_json(result: ExperimentResult, path) -> None:
    Path(path).write_text(json.dumps(summary_dict(result), indent=2, sort_keys=True) + "\n")


@dataclass
class SweepPoint:
    value: float
    result: ExperimentResult


def _format_value(value: float) -> str:
    return f"{value:g}"


def alpha_sensitivity_sweep(
    config: ExperimentConfig, alphas: list[float]
) -> list[SweepPoint]:
    """Run the experiment once per fixed mixing weight, adaptation disabled."""
    points = []
    for alpha in alphas:
        if alpha + config.prism.beta > 1 + 1e-12:
            raise ValueError(
                f"fixed alpha {alpha} + beta {config.prism.beta} exceeds 1"
            )
        point_config = replace(
            config,
            name=f"{config.name}_alpha{_format_value(alpha)}",
            prism=replace(config.prism, alpha_override=alpha, init_alpha=alpha),
        )
        points.append(SweepPoint(alpha, run_experiment(point_config)))
    return points


def inference_weight_sweep(
    config: ExperimentConfig, weights: list[float]
) -> list[SweepPoint]:
    """Run the experiment once per fixed routing weight (0 = backbone only)."""
    points = []
    for weight in weights:
        if not 0 <= weight <= 1:
            raise ValueError(f"inference weight must lie in [0, 1], got {weight}")
        point_config = replace(
            config,
            name=f"{config.name}_w{_format_value(weight)}",
            prism=replace(config.prism, inference_weight_override=weight),
        )
        points.append(SweepPoint(weight, run_experiment(point_config)))
    return points


def sweep_table(points: list[SweepPoint], value_name: str) -> list[dict]:
    return [
        {
            value_name: p.value,
            "final_global": p.result.final.global_acc,
            "best_global": p.result.best_global,
            "final_local": p.result.final.mean_local_acc,
            "best_local": p.result.best_local,
        }
        for p in points
    ]


@dataclass
class ComparisonRow:
    algorithm: str
    global_mean: float
    global_std: float
    local_mean: float
    local_std: float
    per_seed_global: list[float]
    per_seed_local: list[float]
    results: list[ExperimentResult] = field(repr=False, default_factory=list)


_SHARED_FIELDS = (
    "dataset",
    "partition",
    "hidden_dims",
    "rounds",
    "client_fraction",
    "eval_every",
    "train",
    "seed",
)


def compare_algorithms(
    configs: list[ExperimentConfig], seeds: list[int]
) -> list[ComparisonRow]:
    """Run each algorithm config across the shared seed list and report
    final-round global/local accuracy as mean and sample std (std is 0 for a
    single seed)."""
    if not configs:
        raise ValueError("no algorithm configs to compare")
    if not seeds:
        raise ValueError("no seeds to compare over")
    names = [c.algorithm for c in configs]
    if len(set(names)) != len(names):
        raise ValueError(f"each algorithm may appear once, got {names}")
    for shared in _SHARED_FIELDS:
        values = {repr(getattr(c, shared)) for c in configs}
        if len(values) > 1:
            raise ValueError(f"configs must share {shared!r}, got {sorted(values)}")

    rows = []
    for config in configs:
        results = [run_experiment(replace(config, seed=s)) for s in seeds]
        finals_g = [r.final.global_acc for r in results]
        finals_l = [r.final.mean_local_acc for r in results]
        rows.append(
            ComparisonRow(
                algorithm=config.algorithm,
                global_mean=float(np.mean(finals_g)),
                global_std=float(np.std(finals_g, ddof=1)) if len(seeds) > 1 else 0.0,
                local_mean=float(np.mean(finals_l)),
                local_std=float(np.std(finals_l, ddof=1)) if len(seeds) > 1 else 0.0,
                per_seed_global=finals_g,
                per_seed_local=finals_l,
                results=results,
            )
        )
    return rows
