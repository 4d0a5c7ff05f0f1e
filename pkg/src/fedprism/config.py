"""Shared configuration dataclasses for local training and the protocol."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TrainConfig:
    """Local SGD settings used by every algorithm's client update."""

    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class ComponentMask:
    """Ablation switches for the three composition components."""

    use_global: bool = True
    use_cluster: bool = True
    use_private: bool = True

    def __post_init__(self):
        if not (self.use_global or self.use_cluster or self.use_private):
            raise ValueError("at least one composition component must stay enabled")

    @property
    def all_on(self) -> bool:
        return self.use_global and self.use_cluster and self.use_private


@dataclass(frozen=True)
class PrismHyperparams:
    """Protocol constants for the prism-decomposition algorithm.

    alpha_override pins every client's mixing weight and disables its
    adaptation (the fixed-alpha sensitivity ablation); the inference weight
    override replaces the specialist-confidence routing weight at evaluation
    time (the fixed-weight ablation).
    """

    n_clusters: int = 5
    beta: float = 0.1  # cluster-mixture coefficient
    tau: float = 0.5  # assignment softmax temperature
    eta_cluster: float = 0.5  # cluster moving-average step
    eta_alpha: float = 0.1  # mixing-weight adaptation step
    warmup_rounds: int = 10
    recluster_every: int = 10
    temperature: float = 1.0  # routing confidence temperature
    init_alpha: float = 0.5
    cluster_init_sigma: float = 0.01
    kmeans_max_iters: int = 50
    component_mask: ComponentMask = ComponentMask()
    alpha_override: float | None = None
    inference_weight_override: float | None = None

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.eta_cluster <= 1:
            raise ValueError("eta_cluster must lie in (0, 1]")
        if self.eta_alpha <= 0:
            raise ValueError("eta_alpha must be positive")
        if self.warmup_rounds < 0:
            raise ValueError("warmup_rounds must be >= 0")
        if self.recluster_every < 1:
            raise ValueError("recluster_every must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.cluster_init_sigma < 0:
            raise ValueError("cluster_init_sigma must be >= 0")
        if self.kmeans_max_iters < 1:
            raise ValueError("kmeans_max_iters must be >= 1")
        for label, value in (("init_alpha", self.init_alpha), ("alpha_override", self.alpha_override)):
            if value is None:
                continue
            if not 0 <= value <= 1:
                raise ValueError(f"{label} must lie in [0, 1]")
            if value + self.beta > 1 + 1e-12:
                raise ValueError(f"{label} + beta must not exceed 1 (got {value} + {self.beta})")
        if self.inference_weight_override is not None and not 0 <= self.inference_weight_override <= 1:
            raise ValueError("inference_weight_override must lie in [0, 1]")
