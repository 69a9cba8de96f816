"""Desk-scale vision transformer: patchify -> pre-LN encoder blocks -> classifier.

One implementation of the forward pass serves inference, activation
capture, and training: ops come from `autodiff` and degrade to plain
numpy when no parameter is wrapped in a Node. The per-layer MLP is a
pluggable callable so the MoE runtime can swap in routed expert MLPs
without duplicating the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node, val
from .errors import ConfigError, DimensionError, NumericError
from .tensor import RngState, Tensor


@dataclass(frozen=True)
class ModelSpec:
    image_size: int
    patch_size: int
    channels: int
    embed_dim: int
    num_layers: int
    num_heads: int
    mlp_ratio: float
    num_classes: int

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        h = self.mlp_ratio * self.embed_dim
        if abs(h - round(h)) > 1e-9 or round(h) < 1:
            raise ConfigError("mlp_ratio * embed_dim must be a positive integer")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "channels": self.channels, "embed_dim": self.embed_dim,
            "num_layers": self.num_layers, "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio, "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: d[k] for k in (
            "image_size", "patch_size", "channels", "embed_dim",
            "num_layers", "num_heads", "mlp_ratio", "num_classes")})


@dataclass
class ActivationRecord:
    """One token's MLP input / hidden activation with full provenance."""

    layer: int
    token_index: int
    image_id: int
    class_label: int
    x: Tensor
    y: Tensor


@dataclass
class CaptureSet:
    """Columnar batch of ActivationRecords (cheap at 100k+ tokens)."""

    layer: np.ndarray
    token_index: np.ndarray
    image_id: np.ndarray
    class_label: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.layer)

    def __getitem__(self, i: int) -> ActivationRecord:
        return ActivationRecord(int(self.layer[i]), int(self.token_index[i]),
                                int(self.image_id[i]), int(self.class_label[i]),
                                self.x[i], self.y[i])

    def for_layer(self, layer: int) -> "CaptureSet":
        m = self.layer == layer
        return CaptureSet(self.layer[m], self.token_index[m], self.image_id[m],
                          self.class_label[m], self.x[m], self.y[m])

    def subset(self, mask_or_idx) -> "CaptureSet":
        i = mask_or_idx
        return CaptureSet(self.layer[i], self.token_index[i], self.image_id[i],
                          self.class_label[i], self.x[i], self.y[i])

    @property
    def layers_present(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.layer))

    @classmethod
    def from_records(cls, records: list[ActivationRecord]) -> "CaptureSet":
        return cls(
            np.array([r.layer for r in records], dtype=np.int64),
            np.array([r.token_index for r in records], dtype=np.int64),
            np.array([r.image_id for r in records], dtype=np.int64),
            np.array([r.class_label for r in records], dtype=np.int64),
            np.stack([np.asarray(r.x, dtype=np.float32) for r in records]),
            np.stack([np.asarray(r.y, dtype=np.float32) for r in records]),
        )

    @classmethod
    def concatenate(cls, parts: list["CaptureSet"]) -> "CaptureSet":
        return cls(*[np.concatenate([getattr(p, f) for p in parts])
                     for f in ("layer", "token_index", "image_id", "class_label", "x", "y")])


def init_weights(spec: ModelSpec, rng: RngState, std: float = 0.02) -> dict:
    """DeiT-style initialization: N(0, std) projections, zero biases, unit LN gains."""
    e, h = spec.embed_dim, spec.hidden_dim
    p = {
        "patch_embed.w": rng.normal((spec.patch_dim, e), std),
        "patch_embed.b": np.zeros(e, np.float32),
        "cls_token": rng.normal((1, 1, e), std),
        "pos_embed": rng.normal((1, spec.seq_len, e), std),
        "norm.g": np.ones(e, np.float32),
        "norm.b": np.zeros(e, np.float32),
        "head.w": rng.normal((e, spec.num_classes), std),
        "head.b": np.zeros(spec.num_classes, np.float32),
    }
    for i in range(spec.num_layers):
        b = f"blocks.{i}."
        for nm in ("wq", "wk", "wv", "wo"):
            p[b + "attn." + nm] = rng.normal((e, e), std)
        for nm in ("bq", "bk", "bv", "bo"):
            p[b + "attn." + nm] = np.zeros(e, np.float32)
        p[b + "ln1.g"] = np.ones(e, np.float32)
        p[b + "ln1.b"] = np.zeros(e, np.float32)
        p[b + "ln2.g"] = np.ones(e, np.float32)
        p[b + "ln2.b"] = np.zeros(e, np.float32)
        p[b + "mlp.w1"] = rng.normal((e, h), std)
        p[b + "mlp.b1"] = np.zeros(h, np.float32)
        p[b + "mlp.w2"] = rng.normal((h, e), std)
        p[b + "mlp.b2"] = np.zeros(e, np.float32)
    return p


def patchify(spec: ModelSpec, images: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, num_patches, C*ps*ps), row-major patch order."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1:] != (spec.channels, spec.image_size, spec.image_size):
        raise DimensionError(
            f"expected images of shape (B, {spec.channels}, {spec.image_size}, "
            f"{spec.image_size}), got {images.shape}")
    b, c = images.shape[0], spec.channels
    g, ps = spec.grid, spec.patch_size
    x = images.reshape(b, c, g, ps, g, ps)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, c * ps * ps))


def _attention(spec: ModelSpec, p: dict, i: int, h):
    b = f"blocks.{i}.attn."
    bsz, s, e = val(h).shape
    nh, dh = spec.num_heads, spec.embed_dim // spec.num_heads

    def split_heads(t):
        return ad.transpose(ad.reshape(t, (bsz, s, nh, dh)), (0, 2, 1, 3))

    q = split_heads(ad.add(ad.matmul(h, p[b + "wq"]), p[b + "bq"]))
    k = split_heads(ad.add(ad.matmul(h, p[b + "wk"]), p[b + "bk"]))
    v = split_heads(ad.add(ad.matmul(h, p[b + "wv"]), p[b + "bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.softmax(scores, axis=-1)
    o = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3))
    o = ad.reshape(o, (bsz, s, e))
    return ad.add(ad.matmul(o, p[b + "wo"]), p[b + "bo"])


def dense_mlp_fn(p: dict):
    def mlp(i, h2, sink=None):
        b = f"blocks.{i}.mlp."
        hid = ad.gelu(ad.add(ad.matmul(h2, p[b + "w1"]), p[b + "b1"]))
        if sink is not None:
            sink(i, val(h2), val(hid))
        return ad.add(ad.matmul(hid, p[b + "w2"]), p[b + "b2"])
    return mlp


def encode(spec: ModelSpec, p: dict, images: Tensor, mlp_fn=None, sink=None,
           capture_layers=None):
    """Shared encoder; returns logits (Node if any param is a Node)."""
    patches = patchify(spec, images)
    bsz = patches.shape[0]
    if mlp_fn is None:
        mlp_fn = dense_mlp_fn(p)
    x = ad.add(ad.matmul(patches, p["patch_embed.w"]), p["patch_embed.b"])
    cls = ad.tile_rows(p["cls_token"], bsz)
    x = ad.concat([cls, x], axis=1)
    x = ad.add(x, p["pos_embed"])
    for i in range(spec.num_layers):
        b = f"blocks.{i}."
        h1 = ad.layer_norm(x, p[b + "ln1.g"], p[b + "ln1.b"])
        x = ad.add(x, _attention(spec, p, i, h1))
        h2 = ad.layer_norm(x, p[b + "ln2.g"], p[b + "ln2.b"])
        layer_sink = sink if (capture_layers is None or i in capture_layers) else None
        x = ad.add(x, mlp_fn(i, h2, sink=layer_sink))
    x = ad.layer_norm(x, p["norm.g"], p["norm.b"])
    cls_out = ad.getitem(x, (slice(None), 0))
    return ad.add(ad.matmul(cls_out, p["head.w"]), p["head.b"])


def forward(spec: ModelSpec, params: dict, images: Tensor) -> Tensor:
    return encode(spec, params, images)


def forward_with_capture(spec: ModelSpec, params: dict, images: Tensor,
                         layers, image_ids=None, class_labels=None,
                         include_class_token: bool = True):
    """Forward pass recording (x, y) for every token at the requested layers.

    Capture is non-invasive: logits are bitwise those of forward().
    """
    layers = set(int(l) for l in layers)
    if any(l < 0 or l >= spec.num_layers for l in layers):
        raise ConfigError(f"capture layers {sorted(layers)} outside [0, {spec.num_layers})")
    bsz = np.asarray(images).shape[0]
    s = spec.seq_len
    if image_ids is None:
        image_ids = np.arange(bsz, dtype=np.int64)
    if class_labels is None:
        class_labels = np.full(bsz, -1, dtype=np.int64)
    captured = {}

    def sink(i, x_val, y_val):
        captured[i] = (x_val, y_val)

    logits = encode(spec, params, images, sink=sink, capture_layers=layers)
    parts = []
    tok0 = 0 if include_class_token else 1
    tok_ids = np.tile(np.arange(tok0, s, dtype=np.int64), bsz)
    img_col = np.repeat(np.asarray(image_ids, dtype=np.int64), s - tok0)
    lbl_col = np.repeat(np.asarray(class_labels, dtype=np.int64), s - tok0)
    for l in sorted(layers):
        xs, ys = captured[l]
        xs, ys = xs[:, tok0:], ys[:, tok0:]
        parts.append(CaptureSet(
            layer=np.full(len(tok_ids), l, dtype=np.int64),
            token_index=tok_ids.copy(), image_id=img_col.copy(), class_label=lbl_col.copy(),
            x=np.ascontiguousarray(xs.reshape(-1, xs.shape[-1])),
            y=np.ascontiguousarray(ys.reshape(-1, ys.shape[-1]))))
    if parts:
        records = CaptureSet.concatenate(parts)
    else:
        e, h = spec.embed_dim, spec.hidden_dim
        z = np.zeros(0, dtype=np.int64)
        records = CaptureSet(z, z.copy(), z.copy(), z.copy(),
                             np.zeros((0, e), np.float32), np.zeros((0, h), np.float32))
    return logits, records


@dataclass
class LossSpec:
    """Weighted sum of hard-label cross-entropy and distillation KL."""

    ce_weight: float = 1.0
    kd_weight: float = 0.0
    temperature: float = 2.0
    teacher_logits: Tensor | None = None

    def __post_init__(self):
        if self.kd_weight > 0 and self.teacher_logits is None:
            raise ConfigError("distillation loss requires teacher_logits")


def compute_loss(logits, labels, loss_spec: LossSpec):
    loss = None
    if loss_spec.ce_weight != 0.0:
        loss = ad.scale(ad.cross_entropy(logits, labels), loss_spec.ce_weight)
    if loss_spec.kd_weight != 0.0:
        kd = ad.scale(ad.kl_to_teacher(logits, loss_spec.teacher_logits,
                                       loss_spec.temperature), loss_spec.kd_weight)
        loss = kd if loss is None else ad.add(loss, kd)
    if loss is None:
        raise ConfigError("loss_spec has zero weight on every term")
    return loss


def backward(spec: ModelSpec, params: dict, images: Tensor, labels,
             loss_spec: LossSpec | None = None, mlp_fn_factory=None):
    """Gradients of the mean batch loss for every parameter tensor.

    Returns (loss_value, grads) where grads mirrors the params dict;
    tensors the loss does not reach get zero gradients.
    """
    if loss_spec is None:
        loss_spec = LossSpec()
    nodes = {k: Node(v) for k, v in params.items()}
    mlp_fn = mlp_fn_factory(nodes) if mlp_fn_factory is not None else None
    logits = encode(spec, nodes, images, mlp_fn=mlp_fn)
    loss = compute_loss(logits, np.asarray(labels), loss_spec)
    loss_val = float(val(loss))
    if not np.isfinite(loss_val):
        raise NumericError(f"non-finite loss {loss_val}")
    ad.backward(loss)
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value))
             for k, n in nodes.items()}
    return loss_val, grads


@dataclass
class OptimizerConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    lr_min_factor: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamW:
    """Decoupled-weight-decay Adam with cosine-annealed learning rate."""

    def __init__(self, params: dict, cfg: OptimizerConfig, total_steps: int,
                 decay_filter=None):
        self.cfg = cfg
        self.total_steps = max(total_steps, 1)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.decay_filter = decay_filter or (lambda name: name.endswith((".w", ".w1", ".w2"))
                                             or "attn.w" in name or name == "patch_embed.w")

    def current_lr(self) -> float:
        cfg = self.cfg
        frac = min(self.t / self.total_steps, 1.0)
        lo = cfg.lr * cfg.lr_min_factor
        return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def step(self, params: dict, grads: dict):
        cfg = self.cfg
        lr = self.current_lr()
        self.t += 1
        b1t = 1.0 - cfg.beta1**self.t
        b2t = 1.0 - cfg.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            upd = mhat / (np.sqrt(vhat) + cfg.eps)
            if cfg.weight_decay and self.decay_filter(k):
                upd = upd + cfg.weight_decay * p
            params[k] = (p - lr * upd).astype(p.dtype)


def train_base(spec: ModelSpec, dataset, cfg: OptimizerConfig, rng: RngState,
               params: dict | None = None, log=None) -> dict:
    """Train a dense ViT from scratch with cross-entropy."""
    if len(dataset.images) == 0:
        raise ConfigError("empty dataset")
    if params is None:
        params = init_weights(spec, rng.child(0))
    else:
        params = {k: v.copy() for k, v in params.items()}
    n = len(dataset.images)
    steps_per_epoch = max((n + cfg.batch_size - 1) // cfg.batch_size, 1)
    opt = AdamW(params, cfg, total_steps=cfg.epochs * steps_per_epoch)
    shuffle_rng = rng.child(1)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s0 in range(0, n, cfg.batch_size):
            idx = order[s0:s0 + cfg.batch_size]
            loss, grads = backward(spec, params, dataset.images[idx],
                                   dataset.labels[idx], LossSpec())
            opt.step(params, grads)
            total += loss * len(idx)
        if log is not None:
            log(epoch, total / n)
    return params


def predictions(spec: ModelSpec, params: dict, images: Tensor,
                batch_size: int = 64) -> np.ndarray:
    out = []
    for s0 in range(0, len(images), batch_size):
        out.append(np.argmax(forward(spec, params, images[s0:s0 + batch_size]), axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
