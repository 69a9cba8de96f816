"""Routing analyses: per-class distributions, load balance, mean-input
similarity, expert counts, sample-size stability, and patch export."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusteringConfig, cluster_layer_activations
from .errors import ValidationError
from .extraction import ExtractionConfig, extract_layer
from .finetune import evaluate
from .moe import MoeModel, RoutingTrace, assemble
from .tensor import RngState
from .vit import forward_with_capture


@dataclass
class RoutingStats:
    layer: int
    counts: np.ndarray                 # per-expert token counts, all classes
    per_class: dict = field(default_factory=dict)  # class -> count vector

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def fractions(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise ValidationError(f"layer {self.layer}: empty routing stats")
        return self.counts / total

    def class_fractions(self, label) -> np.ndarray:
        c = self.per_class[label]
        return c / c.sum()


def routing_distribution(trace: RoutingTrace, layer: int, k: int | None = None,
                         class_filter=None) -> RoutingStats:
    if len(trace) == 0:
        raise ValidationError("empty routing trace")
    mask = trace.layer == layer
    if not mask.any():
        raise ValidationError(f"no trace entries for layer {layer}")
    experts = trace.expert_id[mask]
    labels = trace.class_label[mask]
    if k is None:
        k = int(experts.max()) + 1
    present = set(np.unique(labels).tolist())
    if class_filter is not None:
        unknown = set(int(c) for c in class_filter) - present
        if unknown:
            raise ValidationError(f"classes {sorted(unknown)} not in trace")
        keep = np.isin(labels, list(class_filter))
        experts, labels = experts[keep], labels[keep]
    stats = RoutingStats(layer=layer, counts=np.bincount(experts, minlength=k))
    for c in np.unique(labels):
        stats.per_class[int(c)] = np.bincount(experts[labels == c], minlength=k)
    return stats


def routing_distributions(trace: RoutingTrace, model: MoeModel,
                          class_filter=None) -> list:
    return [routing_distribution(trace, i, k=model.layers[i].k,
                                 class_filter=class_filter)
            for i in model.converted()]


def load_balance_curve(stats: RoutingStats) -> np.ndarray:
    return np.sort(stats.fractions)[::-1]


def class_overlap(stats: RoutingStats, class_a, class_b) -> float:
    """Total-variation distance between two classes' routing distributions."""
    fa = stats.class_fractions(class_a)
    fb = stats.class_fractions(class_b)
    return 0.5 * float(np.abs(fa - fb).sum())


@dataclass
class SimilarityMatrix:
    layer: int
    values: np.ndarray                 # k x k cosine similarities


def similarity_matrix(model: MoeModel, layer: int) -> SimilarityMatrix:
    if layer not in model.layers:
        raise ValidationError(f"layer {layer} is dense, no expert means")
    means = np.asarray(model.layers[layer].means, np.float64)
    s = means @ means.T
    return SimilarityMatrix(layer=layer, values=np.clip(s, -1.0, 1.0))


def expert_count_table(model: MoeModel) -> list:
    return [model.layers[i].k if i in model.layers else 0
            for i in range(model.spec.num_layers)]


def capture_activations(spec, params, dataset, layers, n_images, rng: RngState,
                        batch_size: int = 64, include_class_token: bool = True):
    """Capture MLP activations for a random image subset (without replacement)."""
    n_images = min(n_images, len(dataset.images))
    pick = np.sort(rng.choice(len(dataset.images), size=n_images, replace=False))
    parts = []
    from .vit import CaptureSet
    for s0 in range(0, n_images, batch_size):
        idx = pick[s0:s0 + batch_size]
        _, recs = forward_with_capture(spec, params, dataset.images[idx], layers,
                                       image_ids=idx, class_labels=dataset.labels[idx],
                                       include_class_token=include_class_token)
        parts.append(recs)
    return CaptureSet.concatenate(parts)


def build_moe(spec, params, captures, layers, cluster_cfg: ClusteringConfig,
              extract_cfg: ExtractionConfig, metric: str = "cosine"):
    """Cluster each requested layer and assemble the MoE model.

    Layers where HDBSCAN finds no clusters stay dense. Returns the model
    and the per-layer ClusterAssignment dict.
    """
    experts = {}
    assignments = {}
    for layer in sorted(layers):
        recs = captures.for_layer(layer)
        assignment = cluster_layer_activations(recs, cluster_cfg)
        assignments[layer] = assignment
        if assignment.k >= 1:
            experts[layer] = extract_layer(recs, assignment, extract_cfg)
    return assemble(spec, params, experts, metric=metric), assignments


def stability_experiment(spec, params, dataset, eval_dataset, layers,
                         sample_sizes, seeds, cluster_cfg: ClusteringConfig,
                         extract_cfg: ExtractionConfig) -> dict:
    """Capture/extract/evaluate per (sample size, seed); mean and sigma per size."""
    rows = []
    for size in sample_sizes:
        for seed in seeds:
            rng = RngState(seed).child(size)
            caps = capture_activations(spec, params, dataset, layers, size, rng)
            model, _ = build_moe(spec, params, caps, layers, cluster_cfg, extract_cfg)
            top1 = evaluate(model, eval_dataset)["top1"]
            rows.append({"size": int(size), "seed": int(seed), "top1": top1,
                         "k_per_layer": expert_count_table(model)})
    summary = {}
    for size in sample_sizes:
        vals = np.array([r["top1"] for r in rows if r["size"] == size])
        summary[int(size)] = {"mean_top1": float(vals.mean()),
                              "std_top1": float(vals.std(ddof=0)),
                              "runs": len(vals)}
    return {"rows": rows, "summary": summary}


def export_expert_patches(model: MoeModel, dataset, layer: int, expert_id: int,
                          max_patches: int, out_dir, batch_size: int = 64) -> list:
    """Write PNG crops of input patches whose tokens routed to the expert.

    Class-token routings carry no patch and are skipped. Returns the
    written paths, named <layer>_<expert>_<image_id>_<token>.png.
    """
    from PIL import Image

    if layer not in model.layers:
        raise ValidationError(f"layer {layer} is dense")
    if expert_id < 0 or expert_id >= model.layers[layer].k:
        raise ValidationError(f"layer {layer} has no expert {expert_id}")
    os.makedirs(out_dir, exist_ok=True)
    out = evaluate(model, dataset, batch_size=batch_size, with_trace=True)
    trace = out["trace"]
    sel = (trace.layer == layer) & (trace.expert_id == expert_id) & (trace.token_index > 0)
    img_ids = trace.image_id[sel][:max_patches]
    tok_ids = trace.token_index[sel][:max_patches]
    spec = model.spec
    ps, g = spec.patch_size, spec.grid
    paths = []
    for img_id, tok in zip(img_ids, tok_ids):
        gy, gx = divmod(int(tok) - 1, g)
        img = dataset.denormalize(dataset.images[int(img_id)][None])[0]
        patch = img[:, gy * ps:(gy + 1) * ps, gx * ps:(gx + 1) * ps]
        arr = np.clip(patch * 255.0, 0, 255).astype(np.uint8).transpose(1, 2, 0)
        pil = Image.fromarray(arr.squeeze(-1) if arr.shape[-1] == 1 else arr)
        path = os.path.join(out_dir, f"{layer}_{expert_id}_{int(img_id)}_{int(tok)}.png")
        pil.save(path)
        paths.append(path)
    return paths


def write_routing_stats_csv(path, stats_list):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "class", "expert", "count", "fraction"])
        for st in stats_list:
            fr = st.fractions
            for e in range(st.k):
                w.writerow([st.layer, "all", e, int(st.counts[e]), repr(float(fr[e]))])
            for c in sorted(st.per_class):
                cf = st.class_fractions(c)
                for e in range(st.k):
                    w.writerow([st.layer, c, e, int(st.per_class[c][e]),
                                repr(float(cf[e]))])


def write_similarity_csv(path, sim: SimilarityMatrix):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in sim.values:
            w.writerow([repr(float(v)) for v in row])


def write_expert_counts_csv(path, model: MoeModel):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "k"])
        for i, k in enumerate(expert_count_table(model)):
            w.writerow([i, k])


def write_stability_csv(path, result: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["size", "seed", "top1", "k_per_layer"])
        for r in result["rows"]:
            w.writerow([r["size"], r["seed"], repr(r["top1"]),
                        " ".join(str(k) for k in r["k_per_layer"])])
