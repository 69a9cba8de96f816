"""Turn per-layer cluster assignments into expert subnetworks.

Each cluster becomes an expert: the hidden neurons whose within-cluster
activation variance cumulatively covers the extraction percentage, plus
the unit-normalized mean of the member input tokens used for routing.
Magnitude and random selection criteria exist for the ablations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterAssignment
from .errors import ConfigError, DegenerateStatisticsError, ValidationError
from .tensor import RngState, Tensor


@dataclass
class ExtractionConfig:
    extraction_percentage: float = 0.8
    criterion: str = "variance"     # variance | magnitude | random
    seed: int = 0                   # used only by criterion="random"

    def __post_init__(self):
        if not 0 < self.extraction_percentage <= 1:
            raise ConfigError("extraction_percentage must be in (0, 1]")
        if self.criterion not in ("variance", "magnitude", "random"):
            raise ConfigError(f"unknown extraction criterion {self.criterion!r}")


@dataclass
class ExpertSpec:
    layer: int
    expert_id: int
    neuron_indices: np.ndarray   # strictly increasing, into [0, hidden_dim)
    mu: Tensor                   # unit-norm mean input token
    member_count: int
    raw_mean: Tensor | None = None  # un-normalized mean, needed for euclidean routing

    def __post_init__(self):
        self.neuron_indices = np.asarray(self.neuron_indices, dtype=np.int64)
        if len(self.neuron_indices) == 0:
            raise ValidationError("expert with empty neuron set")
        if np.any(np.diff(self.neuron_indices) <= 0):
            raise ValidationError("neuron_indices must be strictly increasing")
        if abs(float(np.linalg.norm(self.mu)) - 1.0) > 1e-6:
            raise ValidationError("expert mean input must have unit L2 norm")

    def to_dict(self) -> dict:
        d = {"layer": self.layer, "expert_id": self.expert_id,
             "neuron_indices": self.neuron_indices.tolist(),
             "mu": np.asarray(self.mu, dtype=np.float32).tolist(),
             "member_count": self.member_count}
        if self.raw_mean is not None:
            d["raw_mean"] = np.asarray(self.raw_mean, dtype=np.float32).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertSpec":
        raw = d.get("raw_mean")
        return cls(d["layer"], d["expert_id"], np.asarray(d["neuron_indices"]),
                   np.asarray(d["mu"], dtype=np.float32), d["member_count"],
                   None if raw is None else np.asarray(raw, dtype=np.float32))


def cluster_variances(records, assignment: ClusterAssignment, cluster_id: int) -> Tensor:
    """Per-dimension population variance of hidden activations over cluster members."""
    members = assignment.members(cluster_id)
    if len(members) < 2:
        raise DegenerateStatisticsError(
            f"cluster {cluster_id} has {len(members)} members; variance needs >= 2")
    y = records.y[members].astype(np.float64)
    return y.var(axis=0, ddof=0).astype(np.float32)


def cluster_mean_magnitudes(records, assignment: ClusterAssignment, cluster_id: int) -> Tensor:
    members = assignment.members(cluster_id)
    if len(members) == 0:
        raise DegenerateStatisticsError(f"cluster {cluster_id} is empty")
    y = records.y[members].astype(np.float64)
    return np.abs(y.mean(axis=0)).astype(np.float32)


def select_neurons(stat: Tensor, p: float) -> np.ndarray:
    """Smallest descending-stat prefix whose cumulative sum covers p of the total.

    Ties break toward the lower neuron index. Returns sorted indices.
    """
    stat = np.asarray(stat, dtype=np.float64)
    if np.any(stat < 0):
        raise ValidationError("selection statistic must be elementwise >= 0")
    total = stat.sum()
    if total <= 0:
        raise DegenerateStatisticsError("all-zero selection statistic")
    if not 0 < p <= 1:
        raise ConfigError("extraction percentage must be in (0, 1]")
    # stable sort on -stat keeps lower indices first among ties
    order = np.argsort(-stat, kind="stable")
    csum = np.cumsum(stat[order])
    if p == 1.0:
        count = int((stat[order] > 0).sum())
    else:
        count = int(np.searchsorted(csum, p * total - 1e-12 * total)) + 1
        count = min(count, len(stat))
    return np.sort(order[:count])


def mean_input(records, assignment: ClusterAssignment, cluster_id: int) -> Tensor:
    """Unit-normalized arithmetic mean of member input tokens."""
    raw = raw_mean_input(records, assignment, cluster_id)
    norm = float(np.linalg.norm(raw))
    if norm < 1e-12:
        raise DegenerateStatisticsError(
            f"cluster {cluster_id}: mean input norm {norm} too small to normalize")
    return (raw / norm).astype(np.float32)


def raw_mean_input(records, assignment: ClusterAssignment, cluster_id: int) -> Tensor:
    members = assignment.members(cluster_id)
    if len(members) == 0:
        raise DegenerateStatisticsError(f"cluster {cluster_id} is empty")
    return records.x[members].astype(np.float64).mean(axis=0)


def extract_layer(records, assignment: ClusterAssignment,
                  config: ExtractionConfig) -> list[ExpertSpec]:
    """One ExpertSpec per cluster. Noise-labeled records never contribute."""
    if assignment.k < 1:
        raise ValidationError("no clusters to extract experts from")
    if len(records) != len(assignment.labels):
        raise ValidationError("records and assignment length mismatch")
    layers = np.unique(records.layer)
    if len(layers) != 1:
        raise ValidationError("extract_layer expects records from a single layer")
    layer = int(layers[0])
    rng = RngState(config.seed).child(layer)
    hidden = records.y.shape[1]
    experts = []
    for c in range(assignment.k):
        variance = cluster_variances(records, assignment, c)
        if config.criterion == "magnitude":
            stat = cluster_mean_magnitudes(records, assignment, c)
            idx = select_neurons(stat, config.extraction_percentage)
        elif config.criterion == "random":
            # same cardinality the variance criterion would produce, so the
            # ablation isolates selection quality rather than expert size
            count = len(select_neurons(variance, config.extraction_percentage))
            idx = np.sort(rng.choice(hidden, size=count, replace=False))
        else:
            idx = select_neurons(variance, config.extraction_percentage)
        experts.append(ExpertSpec(
            layer=layer, expert_id=c, neuron_indices=idx,
            mu=mean_input(records, assignment, c),
            member_count=int((assignment.labels == c).sum()),
            raw_mean=raw_mean_input(records, assignment, c).astype(np.float32)))
    return experts


def save_experts(path, experts_by_layer: dict, meta: dict | None = None):
    payload = {"layers": {str(l): [e.to_dict() for e in specs]
                          for l, specs in experts_by_layer.items()}}
    if meta:
        payload["meta"] = meta
    with open(path, "w") as f:
        json.dump(payload, f)


def load_experts(path) -> tuple[dict, dict]:
    with open(path) as f:
        payload = json.load(f)
    out = {int(l): [ExpertSpec.from_dict(d) for d in specs]
           for l, specs in payload["layers"].items()}
    return out, payload.get("meta", {})
