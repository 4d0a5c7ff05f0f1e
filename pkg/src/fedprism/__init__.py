"""Deterministic federated-learning simulation framework.

Implements prism-decomposed personalized federated learning (three-way
parameter composition, dynamic soft clustering over client prototypes,
confidence-routed dual-stream inference) next to FedAvg, IFCA, and
local-only baselines, all on a shared flat-parameter MLP stack with
non-IID partitioners and a reproducible experiment harness.
"""

from .config import ComponentMask, PrismHyperparams, TrainConfig
from .data import (
    DataBundle,
    LabeledDataset,
    Partition,
    SyntheticConfig,
    dirichlet_partition,
    generate_synthetic,
    load_idx,
    pathological_partition,
)
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    IdxPaths,
    PartitionConfig,
    RoundReport,
    alpha_sensitivity_sweep,
    compare_algorithms,
    inference_weight_sweep,
    run_experiment,
)
from .nn import Batch, ModelSpec, ParamVector

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ComponentMask",
    "DataBundle",
    "ExperimentConfig",
    "ExperimentResult",
    "IdxPaths",
    "LabeledDataset",
    "ModelSpec",
    "ParamVector",
    "Partition",
    "PartitionConfig",
    "PrismHyperparams",
    "RoundReport",
    "SyntheticConfig",
    "TrainConfig",
    "alpha_sensitivity_sweep",
    "compare_algorithms",
    "dirichlet_partition",
    "generate_synthetic",
    "inference_weight_sweep",
    "load_idx",
    "pathological_partition",
    "run_experiment",
    "__version__",
]
