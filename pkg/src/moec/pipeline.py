"""Pipeline stages behind the CLI.

Every stage is a deterministic function of (RunConfig, out dir): stage
seeds are derived from the single top-level seed, and each stage caches
its artifact in the out dir so the subcommands compose incrementally.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import analysis as an
from . import plots
from .clustering import ClusterAssignment, cluster_layer_activations
from .config import RunConfig
from .errors import ConfigError, ValidationError
from .extraction import (ExpertSpec, ExtractionConfig, extract_layer,
                         load_experts, save_experts)
from .finetune import evaluate, finetune, retention
from .modelio import (load_capture, load_idx, load_model, save_capture,
                      save_model, synth_dataset)
from .moe import (assemble, count_costs, moe_from_tensors, moe_meta,
                  moe_tensors)
from .tensor import RngState
from .vit import train_base

DENSE = "dense.moec"
CAPTURE = "capture.npz"
EXPERTS = "experts.json"
MOE = "moe.moec"
MOE_FT = "moe_ft.moec"


def _path(out, name):
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    return payload


def make_datasets(cfg: RunConfig):
    """(train, eval, capture-pool) datasets, all derived from cfg.seed."""
    d = cfg.data
    if d.kind == "idx":
        train = load_idx(d.images_path, d.labels_path)
        if d.eval_images_path:
            evald = load_idx(d.eval_images_path, d.eval_labels_path)
        else:
            n = len(train)
            split = max(n - max(n // 5, 1), 1)
            evald, train = train.subset(slice(split, n)), train.subset(slice(0, split))
        pool = train
    else:
        size, ch = cfg.model.image_size, cfg.model.channels
        kw = dict(image_size=size, channels=ch, num_classes=d.num_classes,
                  noise=d.noise, max_shift=d.max_shift)
        train = synth_dataset(d.n_train, RngState(cfg.seed).child(10), **kw)
        evald = synth_dataset(d.n_eval, RngState(cfg.seed).child(11), **kw)
        n_img = cfg.capture.images_needed(cfg.tokens_per_image)
        pool = synth_dataset(n_img, RngState(cfg.seed).child(12), **kw)
    return train, evald, pool


def stage_train(cfg: RunConfig, out) -> dict:
    path = _path(out, DENSE)
    if os.path.exists(path):
        spec, _, header = load_model(path)
        return header.get("train_summary", {"path": path})
    train_ds, eval_ds, _ = make_datasets(cfg)
    params = train_base(cfg.model, train_ds, cfg.train, RngState(cfg.seed))
    top1 = evaluate((cfg.model, params), eval_ds)["top1"]
    summary = {"path": path, "dense_top1": top1, "seed": cfg.seed,
               "epochs": cfg.train.epochs, "n_train": len(train_ds)}
    save_model(path, cfg.model, params, extra_meta={"train_summary": summary})
    return summary


def _load_dense(cfg, out):
    path = _path(out, DENSE)
    if not os.path.exists(path):
        stage_train(cfg, out)
    spec, params, header = load_model(path)
    if spec != cfg.model:
        raise ConfigError(f"{path} was trained with a different model spec")
    return params, header


def stage_capture(cfg: RunConfig, out) -> dict:
    path = _path(out, CAPTURE)
    if os.path.exists(path):
        recs = load_capture(path)
        return {"path": path,
                "tokens_per_layer": int(len(recs) / max(len(recs.layers_present), 1))}
    params, _ = _load_dense(cfg, out)
    _, _, pool = make_datasets(cfg)
    n_img = cfg.capture.images_needed(cfg.tokens_per_image)
    recs = an.capture_activations(cfg.model, params, pool, set(cfg.capture.layers),
                                  n_img, RngState(cfg.seed).child(2),
                                  include_class_token=cfg.capture.include_class_token)
    save_capture(path, recs)
    per_layer = int(len(recs) / max(len(cfg.capture.layers), 1))
    return {"path": path, "tokens_per_layer": per_layer, "images": n_img}


ASSIGNMENTS = "assignments.npz"


def cluster_captures(cfg: RunConfig, captures, out=None) -> dict:
    """Per-layer cluster assignments, cached on disk (HDBSCAN dominates runtime)."""
    if out is not None:
        path = _path(out, ASSIGNMENTS)
        if os.path.exists(path):
            with np.load(path) as z:
                return {int(l): ClusterAssignment(z[f"labels_{l}"], int(z[f"k_{l}"]))
                        for l in z["layers"]}
    assignments = {}
    for layer in sorted(cfg.capture.layers):
        recs = captures.for_layer(layer)
        assignments[layer] = cluster_layer_activations(recs, cfg.clustering)
    if out is not None:
        payload = {"layers": np.array(sorted(assignments), np.int64)}
        for l, a in assignments.items():
            payload[f"labels_{l}"] = a.labels
            payload[f"k_{l}"] = np.int64(a.k)
        np.savez(_path(out, ASSIGNMENTS), **payload)
    return assignments


def stage_extract(cfg: RunConfig, out) -> dict:
    epath = _path(out, EXPERTS)
    if os.path.exists(epath):
        experts, meta = load_experts(epath)
        return {"path": epath, "k_per_layer": meta.get("k_per_layer", {})}
    stage_capture(cfg, out)
    captures = load_capture(_path(out, CAPTURE))
    assignments = cluster_captures(cfg, captures, out)
    ext_cfg = dataclasses.replace(cfg.extraction, seed=cfg.seed)
    experts = {}
    k_per_layer = {}
    noise = {}
    for layer, assignment in assignments.items():
        k_per_layer[str(layer)] = assignment.k
        noise[str(layer)] = assignment.noise_fraction()
        if assignment.k >= 1:
            recs = captures.for_layer(layer)
            experts[layer] = extract_layer(recs, assignment, ext_cfg)
    meta = {"k_per_layer": k_per_layer, "noise_fraction": noise,
            "min_cluster_size": cfg.clustering.derived_min_cluster_size(
                len(captures) // max(len(cfg.capture.layers), 1)),
            "criterion": ext_cfg.criterion, "p": ext_cfg.extraction_percentage}
    save_experts(epath, experts, meta=meta)
    return {"path": epath, "k_per_layer": k_per_layer, "noise_fraction": noise}


def stage_assemble(cfg: RunConfig, out) -> dict:
    path = _path(out, MOE)
    if os.path.exists(path):
        model = load_moe(path)
        return {"path": path, "k_per_layer": an.expert_count_table(model)}
    stage_extract(cfg, out)
    params, _ = _load_dense(cfg, out)
    experts, _ = load_experts(_path(out, EXPERTS))
    model = assemble(cfg.model, params, experts, metric=cfg.routing_metric)
    save_moe(path, model)
    return {"path": path, "k_per_layer": an.expert_count_table(model)}


def save_moe(path, model):
    save_model(path, model.spec, moe_tensors(model),
               extra_meta={"moe": moe_meta(model)})


def load_moe(path):
    spec, tensors, header = load_model(path, check_dense_shapes=False)
    if "moe" not in header:
        raise ValidationError(f"{path} has no MoE metadata")
    return moe_from_tensors(spec, tensors, header["moe"])


def stage_finetune(cfg: RunConfig, out) -> dict:
    path = _path(out, MOE_FT)
    if os.path.exists(path):
        return {"path": path}
    stage_assemble(cfg, out)
    model = load_moe(_path(out, MOE))
    teacher, _ = _load_dense(cfg, out)
    train_ds, eval_ds, _ = make_datasets(cfg)
    ft_cfg = dataclasses.replace(cfg.finetune, seed=cfg.seed)
    with open(_path(out, "finetune_log.jsonl"), "w") as log:
        student = finetune(model, teacher, train_ds, ft_cfg, log_file=log,
                           eval_dataset=eval_ds)
    save_moe(path, student)
    return {"path": path, "epochs": ft_cfg.epochs}


def stage_eval(cfg: RunConfig, out, model_path=None) -> dict:
    params, header = _load_dense(cfg, out)
    _, eval_ds, _ = make_datasets(cfg)
    dense_top1 = evaluate((cfg.model, params), eval_ds)["top1"]
    summary = {"dense_top1": dense_top1}
    if model_path is None:
        for cand in (MOE_FT, MOE):
            p = _path(out, cand)
            if os.path.exists(p):
                model_path = p
                break
    if model_path is not None:
        model = load_moe(model_path)
        res = evaluate(model, eval_ds, with_trace=True)
        counts = {i: res["trace"].expert_counts(i, model.layers[i].k)
                  for i in model.converted()}
        rep = count_costs(cfg.model, model, routing_counts=counts)
        summary.update({"model": str(model_path), "top1": res["top1"],
                        "loss": res["loss"],
                        "acc_retention": retention(res["top1"], dense_top1),
                        **rep.to_dict()})
    return _write_json(_path(out, "eval.json"), summary)


def stage_analyze(cfg: RunConfig, out) -> dict:
    stage_assemble(cfg, out)
    ft = _path(out, MOE_FT)
    model = load_moe(ft if os.path.exists(ft) else _path(out, MOE))
    _, eval_ds, _ = make_datasets(cfg)
    res = evaluate(model, eval_ds, with_trace=True)
    trace = res["trace"]
    written = []
    trace_path = _path(out, "trace.csv")
    trace.to_csv(trace_path)
    written.append(trace_path)
    an.write_expert_counts_csv(_path(out, "expert_counts.csv"), model)
    written.append(_path(out, "expert_counts.csv"))
    written.append(plots.plot_expert_counts(model, _path(out, "expert_counts.png")))
    if model.converted():
        stats = an.routing_distributions(trace, model)
        an.write_routing_stats_csv(_path(out, "routing_stats.csv"), stats)
        written.append(_path(out, "routing_stats.csv"))
        written.append(plots.plot_load_balance(stats, _path(out, "load_balance.png")))
        for st in stats:
            written.append(plots.plot_routing_per_class(
                st, _path(out, f"routing_classes_{st.layer}.png")))
        for layer in model.converted():
            sim = an.similarity_matrix(model, layer)
            an.write_similarity_csv(_path(out, f"similarity_{layer}.csv"), sim)
            written.append(_path(out, f"similarity_{layer}.csv"))
            written.append(plots.plot_similarity(
                sim, _path(out, f"similarity_{layer}.png")))
    summary = {"top1": res["top1"], "artifacts": written}
    return _write_json(_path(out, "analyze.json"), summary)


def stage_report(cfg: RunConfig, out) -> dict:
    """Full pipeline: train, capture, extract, assemble, finetune, report."""
    train_summary = stage_train(cfg, out)
    stage_capture(cfg, out)
    extract_summary = stage_extract(cfg, out)
    stage_assemble(cfg, out)
    params, _ = _load_dense(cfg, out)
    _, eval_ds, _ = make_datasets(cfg)
    dense_top1 = train_summary.get("dense_top1")
    if dense_top1 is None:
        dense_top1 = evaluate((cfg.model, params), eval_ds)["top1"]
    pre = load_moe(_path(out, MOE))
    pre_res = evaluate(pre, eval_ds)
    stage_finetune(cfg, out)
    model = load_moe(_path(out, MOE_FT))
    res = evaluate(model, eval_ds, with_trace=True)
    counts = {i: res["trace"].expert_counts(i, model.layers[i].k)
              for i in model.converted()}
    rep = count_costs(cfg.model, model, routing_counts=counts)
    report = {
        "seed": cfg.seed,
        "dense_top1": dense_top1,
        "pre_finetune_top1": pre_res["top1"],
        "top1": res["top1"],
        "acc_retention": retention(pre_res["top1"], dense_top1) if dense_top1 > 0 else None,
        "finetuned_retention": retention(res["top1"], dense_top1) if dense_top1 > 0 else None,
        "macs_reduction": rep.macs_reduction,
        "params_reduction": rep.params_reduction,
        "k_per_layer": an.expert_count_table(model),
        "noise_fraction": extract_summary.get("noise_fraction", {}),
        **rep.to_dict(),
    }
    stage_analyze(cfg, out)
    return _write_json(_path(out, "report.json"), report)


# ---------------------------------------------------------------------------
# Ablation presets (cumulative-component comparison)

ABLATION_PRESETS = ("random", "clustering", "variance", "routing")


def _random_assignment(n: int, k: int, rng: RngState) -> ClusterAssignment:
    labels = rng.integers(0, k, n).astype(np.int64)
    return ClusterAssignment(labels, k)


def _randomize_means(experts_by_layer: dict, rng: RngState) -> dict:
    out = {}
    for layer, specs in experts_by_layer.items():
        new = []
        for s in specs:
            v = rng.child(1000 + layer * 97 + s.expert_id).normal((len(s.mu),))
            v = (v / np.linalg.norm(v)).astype(np.float32)
            new.append(ExpertSpec(s.layer, s.expert_id, s.neuron_indices, v,
                                  s.member_count, raw_mean=s.raw_mean))
        out[layer] = new
    return out


def stage_ablate(cfg: RunConfig, out, presets=ABLATION_PRESETS) -> dict:
    """Run the cumulative ablation presets, sharing base model and capture.

    random:     random cluster labels, random neuron choice, random routing
    clustering: real clusters,         random neuron choice, random routing
    variance:   real clusters,         variance selection,   random routing
    routing:    real clusters,         variance selection,   mean-input routing
    """
    unknown = set(presets) - set(ABLATION_PRESETS)
    if unknown:
        raise ConfigError(f"unknown ablation presets {sorted(unknown)}")
    stage_capture(cfg, out)
    params, _ = _load_dense(cfg, out)
    captures = load_capture(_path(out, CAPTURE))
    assignments = cluster_captures(cfg, captures, out)
    train_ds, eval_ds, _ = make_datasets(cfg)
    dense_top1 = evaluate((cfg.model, params), eval_ds)["top1"]
    rng = RngState(cfg.seed).child(3)
    results = {}
    for preset in presets:
        real_clusters = preset != "random"
        criterion = "variance" if preset in ("variance", "routing") else "random"
        real_routing = preset == "routing"
        experts = {}
        for layer, assignment in assignments.items():
            recs = captures.for_layer(layer)
            if not real_clusters:
                k = max(assignment.k, 2)
                assignment = _random_assignment(len(recs), k, rng.child(layer))
            if assignment.k < 1:
                continue
            ext_cfg = ExtractionConfig(cfg.extraction.extraction_percentage,
                                       criterion, seed=cfg.seed)
            experts[layer] = extract_layer(recs, assignment, ext_cfg)
        if not real_routing:
            experts = _randomize_means(experts, rng)
        model = assemble(cfg.model, params, experts, metric=cfg.routing_metric)
        ft_cfg = dataclasses.replace(cfg.finetune, seed=cfg.seed)
        student = finetune(model, params, train_ds, ft_cfg)
        res = evaluate(student, eval_ds, with_trace=True)
        counts = {i: res["trace"].expert_counts(i, student.layers[i].k)
                  for i in student.converted()}
        rep = count_costs(cfg.model, student, routing_counts=counts)
        results[preset] = {"top1": res["top1"],
                           "retention": retention(res["top1"], dense_top1)
                           if dense_top1 > 0 else None,
                           "macs_reduction": rep.macs_reduction,
                           "params_reduction": rep.params_reduction,
                           "k_per_layer": an.expert_count_table(student)}
        _write_json(_path(out, f"ablation_{preset}.json"),
                    {"preset": preset, "dense_top1": dense_top1, **results[preset]})
    summary = {"dense_top1": dense_top1, "presets": results}
    return _write_json(_path(out, "ablation.json"), summary)


def stage_stability(cfg: RunConfig, out, sizes=None, seeds=None) -> dict:
    stage_train(cfg, out)
    params, _ = _load_dense(cfg, out)
    _, eval_ds, pool = make_datasets(cfg)
    if sizes is None:
        base = cfg.capture.images_needed(cfg.tokens_per_image)
        sizes = sorted({max(base // 4, 1), max(base // 2, 1), base})
    if seeds is None:
        seeds = [0, 1, 2]
    res = an.stability_experiment(cfg.model, params, pool, eval_ds,
                                  cfg.capture.layers, sizes, seeds,
                                  cfg.clustering,
                                  dataclasses.replace(cfg.extraction, seed=cfg.seed))
    an.write_stability_csv(_path(out, "stability.csv"), res)
    return _write_json(_path(out, "stability.json"), res)


def stage_export_patches(cfg: RunConfig, out, layer: int, expert_id: int,
                         max_patches: int) -> dict:
    stage_assemble(cfg, out)
    ft = _path(out, MOE_FT)
    model = load_moe(ft if os.path.exists(ft) else _path(out, MOE))
    _, eval_ds, _ = make_datasets(cfg)
    paths = an.export_expert_patches(model, eval_ds, layer, expert_id,
                                     max_patches, _path(out, "patches"))
    return _write_json(_path(out, "patches.json"),
                       {"layer": layer, "expert": expert_id, "files": paths})
