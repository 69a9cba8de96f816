"""Knowledge-distillation fine-tuning of the MoE model and evaluation.

The dense teacher supplies soft targets; the student's hard routing
decision is treated as a constant each step, so gradients only flow
through the selected expert's compacted weights. Routing means stay
frozen unless the EMA flag is set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import vit
from .errors import ConfigError, ValidationError
from .moe import MoeLayer, MoeModel, count_costs, moe_mlp_fn
from .tensor import RngState
from .vit import LossSpec, OptimizerConfig


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1.5e-5
    weight_decay: float = 0.01
    temperature: float = 2.0
    kd_weight: float = 0.5
    update_router_means: bool = False
    router_momentum: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ConfigError("kd_weight must be in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad epochs/batch_size")


def _decay_filter(name: str) -> bool:
    return (name.endswith((".w", ".w1", ".w2", ".w1c", ".w2c"))
            or "attn.w" in name or name == "patch_embed.w")


def finetune(model: MoeModel, teacher_params: dict, dataset, cfg: FinetuneConfig,
             log_file=None, eval_dataset=None) -> MoeModel:
    """Distill the dense teacher into the MoE student. Returns a new model."""
    if len(dataset.images) == 0:
        raise ValidationError("empty dataset")
    spec = model.spec
    params = {k: v.copy() for k, v in model.params.items()}
    layers = model.layers
    if cfg.update_router_means:
        layers = {i: MoeLayer(ml.layer, ml.kept_indices, ml.experts,
                              np.array(ml.means, np.float32, copy=True),
                              None if ml.raw_means is None else np.array(ml.raw_means, copy=True),
                              list(ml.member_counts))
                  for i, ml in model.layers.items()}
    student = MoeModel(spec=spec, params=params, layers=layers, metric=model.metric)

    n = len(dataset.images)
    steps_per_epoch = max((n + cfg.batch_size - 1) // cfg.batch_size, 1)
    opt_cfg = OptimizerConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                              lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt = vit.AdamW(params, opt_cfg, total_steps=cfg.epochs * steps_per_epoch,
                    decay_filter=_decay_filter)
    shuffle_rng = RngState(cfg.seed).child(1)

    routed = {}

    def route_sink(i, x_flat, routes):
        if cfg.update_router_means:
            routed[i] = (x_flat, routes)

    def factory(nodes):
        return moe_mlp_fn(student, nodes, route_sink=route_sink)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s0 in range(0, n, cfg.batch_size):
            idx = order[s0:s0 + cfg.batch_size]
            imgs, labels = dataset.images[idx], dataset.labels[idx]
            if cfg.kd_weight > 0:
                teacher_logits = vit.forward(spec, teacher_params, imgs)
            else:
                teacher_logits = None
            ls = LossSpec(ce_weight=1.0 - cfg.kd_weight, kd_weight=cfg.kd_weight,
                          temperature=cfg.temperature, teacher_logits=teacher_logits)
            routed.clear()
            loss, grads = vit.backward(spec, params, imgs, labels, ls,
                                       mlp_fn_factory=factory)
            opt.step(params, grads)
            if cfg.update_router_means:
                _ema_update_means(student, routed, cfg.router_momentum)
            total += loss * len(idx)
        if log_file is not None:
            rep = count_costs(spec, student)
            entry = {"epoch": epoch, "train_loss": total / n,
                     "macs": rep.moe_macs, "params": rep.moe_params}
            if eval_dataset is not None:
                entry["eval_top1"] = evaluate(student, eval_dataset)["top1"]
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
    return student


def _ema_update_means(student: MoeModel, routed: dict, momentum: float):
    for i, (x_flat, routes) in routed.items():
        ml = student.layers[i]
        means = np.asarray(ml.means, np.float64)
        for c in range(ml.k):
            sel = routes == c
            if not sel.any():
                continue
            batch_mean = x_flat[sel].astype(np.float64).mean(axis=0)
            norm = np.linalg.norm(batch_mean)
            if norm < 1e-12:
                continue
            updated = momentum * means[c] + (1.0 - momentum) * (batch_mean / norm)
            means[c] = updated / np.linalg.norm(updated)
        ml.means = means.astype(np.float32)
        # restore exact unit norm after the f32 cast
        ml.means /= np.linalg.norm(ml.means.astype(np.float64), axis=1,
                                   keepdims=True).astype(np.float32)


def evaluate(model, dataset, batch_size: int = 64, with_trace: bool = False) -> dict:
    """Top-1 accuracy and mean cross-entropy for a dense or MoE model.

    Dense models are passed as a (spec, params) tuple.
    """
    if len(dataset.images) == 0:
        raise ValidationError("empty dataset")
    from . import autodiff as ad
    from .moe import RoutingTrace, moe_forward

    trace = RoutingTrace() if with_trace else None
    losses, correct = 0.0, 0
    n = len(dataset.images)
    for s0 in range(0, n, batch_size):
        imgs = dataset.images[s0:s0 + batch_size]
        labels = dataset.labels[s0:s0 + batch_size]
        if isinstance(model, MoeModel):
            if with_trace:
                fn = moe_mlp_fn(model, model.params, trace=trace,
                                image_ids=np.arange(s0, s0 + len(imgs)),
                                class_labels=labels)
                logits = vit.encode(model.spec, model.params, imgs, mlp_fn=fn)
            else:
                logits = moe_forward(model, imgs)
        else:
            spec, params = model
            logits = vit.forward(spec, params, imgs)
        losses += float(ad.cross_entropy(logits, labels)) * len(imgs)
        correct += int((np.argmax(logits, axis=-1) == labels).sum())
    out = {"top1": correct / n, "loss": losses / n}
    if with_trace:
        out["trace"] = trace
    return out


def retention(moe_top1: float, dense_top1: float) -> float:
    if dense_top1 <= 0:
        raise ValidationError("dense accuracy must be positive for retention")
    return moe_top1 / dense_top1
