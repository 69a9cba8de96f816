"""MoE model assembly, routed inference, and MAC/parameter accounting.

Converted layers share one compacted pair of projection matrices; each
expert is just an index list into the compacted hidden dimension. Tokens
are routed to a single expert by cosine similarity against the stored
unit-norm cluster means (argmax of the raw dot product).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .errors import ConfigError, RoutingError, ValidationError
from .extraction import ExpertSpec
from .tensor import Tensor
from .vit import ModelSpec, dense_mlp_fn, encode


@dataclass
class MoeLayer:
    layer: int
    kept_indices: np.ndarray          # sorted union of expert neuron sets
    experts: list                     # per-expert indices remapped into compacted space
    means: Tensor                     # k x e, unit-norm rows
    raw_means: Tensor | None = None   # k x e, needed for euclidean routing
    member_counts: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.experts)

    @property
    def expert_sizes(self) -> list:
        return [len(e) for e in self.experts]

    def validate(self, hidden_dim: int):
        kept = self.kept_indices
        if len(kept) == 0 or np.any(np.diff(kept) <= 0):
            raise ValidationError(f"layer {self.layer}: kept_indices not strictly increasing")
        if kept[-1] >= hidden_dim or kept[0] < 0:
            raise ValidationError(f"layer {self.layer}: kept index out of range")
        for c, e in enumerate(self.experts):
            if len(e) == 0 or np.any(np.asarray(e) >= len(kept)):
                raise ValidationError(f"layer {self.layer} expert {c}: bad remapped indices")
        norms = np.linalg.norm(np.asarray(self.means, np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError(f"layer {self.layer}: routing means must be unit norm")


@dataclass
class MoeModel:
    spec: ModelSpec
    params: dict                      # dense params plus blocks.{i}.moe.* for converted layers
    layers: dict                      # layer index -> MoeLayer
    metric: str = "cosine"

    def converted(self) -> list:
        return sorted(self.layers)


def assemble(spec: ModelSpec, params: dict, experts_by_layer: dict,
             metric: str = "cosine") -> MoeModel:
    """Build a MoeModel from dense weights and per-layer ExpertSpec lists.

    Layers absent from experts_by_layer stay dense. Compaction keeps only
    the union of expert neurons; values are bitwise gathers of the dense
    weights, never copies per expert.
    """
    if metric not in ("cosine", "euclidean"):
        raise ConfigError(f"unknown routing metric {metric!r}")
    out_params = {k: v for k, v in params.items()}
    layers = {}
    for layer, specs in sorted(experts_by_layer.items()):
        if not specs:
            continue
        if layer < 0 or layer >= spec.num_layers:
            raise ValidationError(f"expert layer {layer} outside model")
        ids = [e.expert_id for e in specs]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"layer {layer}: duplicate expert ids {ids}")
        specs = sorted(specs, key=lambda e: e.expert_id)
        kept = np.unique(np.concatenate([e.neuron_indices for e in specs]))
        if kept[-1] >= spec.hidden_dim:
            raise ValidationError(f"layer {layer}: neuron index {kept[-1]} out of range")
        pos = {int(n): i for i, n in enumerate(kept)}
        remapped = [np.array([pos[int(n)] for n in e.neuron_indices], np.int64)
                    for e in specs]
        b = f"blocks.{layer}.mlp."
        m = f"blocks.{layer}.moe."
        out_params[m + "w1c"] = np.ascontiguousarray(params[b + "w1"][:, kept])
        out_params[m + "b1c"] = np.ascontiguousarray(params[b + "b1"][kept])
        out_params[m + "w2c"] = np.ascontiguousarray(params[b + "w2"][kept, :])
        out_params[m + "b2"] = params[b + "b2"].copy()
        for suf in ("w1", "b1", "w2", "b2"):
            del out_params[b + suf]
        means = np.stack([np.asarray(e.mu, np.float32) for e in specs])
        raw = None
        if all(e.raw_mean is not None for e in specs):
            raw = np.stack([np.asarray(e.raw_mean, np.float32) for e in specs])
        elif metric == "euclidean":
            raise ValidationError("euclidean routing needs raw (un-normalized) means")
        ml = MoeLayer(layer=layer, kept_indices=kept, experts=remapped, means=means,
                      raw_means=raw, member_counts=[e.member_count for e in specs])
        ml.validate(spec.hidden_dim)
        layers[layer] = ml
    return MoeModel(spec=spec, params=out_params, layers=layers, metric=metric)


def route(x: Tensor, means: Tensor, metric: str = "cosine") -> int:
    """Route one token; ties break toward the lowest expert index."""
    return int(route_batch(np.asarray(x)[None, :], means, metric)[0])


def route_batch(x: Tensor, means: Tensor, metric: str = "cosine") -> np.ndarray:
    x = np.asarray(x)
    means = np.asarray(means)
    if means.ndim != 2 or len(means) < 1:
        raise RoutingError("means must be a nonempty k x e matrix")
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=-1)
        if np.any(norms == 0):
            raise RoutingError("cannot cosine-route a zero-norm token")
        # means are unit norm and the argmax is scale invariant in x,
        # so the raw dot product suffices
        return np.argmax(x @ means.T, axis=-1)
    if metric == "euclidean":
        d2 = np.square(x).sum(-1, keepdims=True) - 2.0 * (x @ means.T) \
            + np.square(means).sum(-1)
        return np.argmin(d2, axis=-1)
    raise ConfigError(f"unknown routing metric {metric!r}")


class RoutingTrace:
    """Columnar (layer, token_index, image_id, class_label, expert_id) log."""

    COLUMNS = ("layer", "token_index", "image_id", "class_label", "expert_id")

    def __init__(self):
        self._parts = []

    def add(self, layer, token_index, image_id, class_label, expert_id):
        self._parts.append((np.full(len(expert_id), layer, np.int64),
                            np.asarray(token_index, np.int64),
                            np.asarray(image_id, np.int64),
                            np.asarray(class_label, np.int64),
                            np.asarray(expert_id, np.int64)))

    def _col(self, i):
        if not self._parts:
            return np.zeros(0, np.int64)
        return np.concatenate([p[i] for p in self._parts])

    @property
    def layer(self):
        return self._col(0)

    @property
    def token_index(self):
        return self._col(1)

    @property
    def image_id(self):
        return self._col(2)

    @property
    def class_label(self):
        return self._col(3)

    @property
    def expert_id(self):
        return self._col(4)

    def __len__(self):
        return sum(len(p[4]) for p in self._parts)

    def expert_counts(self, layer: int, k: int) -> np.ndarray:
        mask = self.layer == layer
        return np.bincount(self.expert_id[mask], minlength=k)

    def to_csv(self, path):
        cols = [self._col(i) for i in range(5)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for row in zip(*cols):
                w.writerow([int(v) for v in row])

    @classmethod
    def from_csv(cls, path):
        t = cls()
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        if len(data):
            t._parts.append(tuple(data[:, i] for i in range(5)))
        return t


def moe_mlp_fn(model: MoeModel, p: dict, trace: RoutingTrace | None = None,
               image_ids=None, class_labels=None, route_sink=None):
    """MLP callable for vit.encode; p may hold Nodes for the moe.* weights."""
    dense = dense_mlp_fn(p)

    def mlp(i, h2, sink=None):
        if i not in model.layers:
            return dense(i, h2, sink=sink)
        ml = model.layers[i]
        m = f"blocks.{i}.moe."
        bsz, s, e = val(h2).shape
        flat = ad.reshape(h2, (bsz * s, e))
        ref = ml.means if model.metric == "cosine" else ml.raw_means
        routes = route_batch(val(flat), ref, model.metric)
        if route_sink is not None:
            route_sink(i, val(flat), routes)
        if trace is not None:
            tok = np.tile(np.arange(s, dtype=np.int64), bsz)
            img = (np.repeat(np.asarray(image_ids, np.int64), s) if image_ids is not None
                   else np.repeat(np.arange(bsz, dtype=np.int64), s))
            lbl = (np.repeat(np.asarray(class_labels, np.int64), s)
                   if class_labels is not None else np.full(bsz * s, -1, np.int64))
            trace.add(i, tok, img, lbl, routes)
        pieces = None
        for c, eidx in enumerate(ml.experts):
            sel = np.nonzero(routes == c)[0]
            if len(sel) == 0:
                continue
            rows = ad.take_rows(flat, sel)
            hid = ad.gelu(ad.add(ad.matmul(rows, ad.take_cols(p[m + "w1c"], eidx)),
                                 ad.take_elems(p[m + "b1c"], eidx)))
            out_rows = ad.matmul(hid, ad.take_rows(p[m + "w2c"], eidx))
            scat = ad.scatter_rows(out_rows, sel, bsz * s)
            pieces = scat if pieces is None else ad.add(pieces, scat)
        if pieces is None:
            pieces = np.zeros((bsz * s, e), np.float32)
        out = ad.add(pieces, p[m + "b2"])
        return ad.reshape(out, (bsz, s, e))

    return mlp


def moe_forward(model: MoeModel, images: Tensor, trace: bool = False,
                image_ids=None, class_labels=None):
    t = RoutingTrace() if trace else None
    fn = moe_mlp_fn(model, model.params, trace=t,
                    image_ids=image_ids, class_labels=class_labels)
    logits = encode(model.spec, model.params, images, mlp_fn=fn)
    return (logits, t) if trace else logits


def moe_predictions(model: MoeModel, images: Tensor, batch_size: int = 64):
    preds = []
    for i in range(0, len(images), batch_size):
        preds.append(np.argmax(moe_forward(model, images[i:i + batch_size]), axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


@dataclass
class CostReport:
    dense_macs: int                   # per image
    moe_macs: float                   # per image, expected under the routing distribution
    moe_macs_worst: int               # per image, every token to the largest expert
    routing_overhead_macs: int        # per image, summed over converted layers
    dense_params: int
    moe_params: int
    per_layer: dict = field(default_factory=dict)

    @property
    def macs_reduction(self) -> float:
        return 1.0 - self.moe_macs / self.dense_macs

    @property
    def params_reduction(self) -> float:
        return 1.0 - self.moe_params / self.dense_params

    def to_dict(self) -> dict:
        return {"dense_macs": self.dense_macs, "moe_macs": self.moe_macs,
                "moe_macs_worst": self.moe_macs_worst,
                "routing_overhead_macs": self.routing_overhead_macs,
                "dense_params": self.dense_params, "moe_params": self.moe_params,
                "macs_reduction": self.macs_reduction,
                "params_reduction": self.params_reduction,
                "per_layer": self.per_layer}


def _dense_layer_macs(spec: ModelSpec) -> dict:
    s, e, h = spec.seq_len, spec.embed_dim, spec.hidden_dim
    attn = 3 * s * e * e + 2 * s * s * e + s * e * e
    mlp = 2 * s * e * h
    return {"attn": attn, "mlp": mlp}


def _dense_model_macs(spec: ModelSpec) -> int:
    per = _dense_layer_macs(spec)
    stem = spec.num_patches * spec.patch_dim * spec.embed_dim
    head = spec.embed_dim * spec.num_classes
    return stem + spec.num_layers * (per["attn"] + per["mlp"]) + head


def _dense_param_count(spec: ModelSpec) -> int:
    e, h = spec.embed_dim, spec.hidden_dim
    per_block = (4 * e * e + 4 * e) + 2 * (2 * e) + (e * h + h + h * e + e)
    return (spec.patch_dim * e + e + e + spec.seq_len * e
            + spec.num_layers * per_block + 2 * e
            + e * spec.num_classes + spec.num_classes)


def count_costs(spec: ModelSpec, model: MoeModel | None = None,
                routing_counts: dict | None = None,
                include_routing_params: bool = True) -> CostReport:
    """Analytic MAC and parameter accounting.

    routing_counts maps layer -> per-expert token counts (from a trace);
    absent that, the expected expert size assumes uniform routing.
    include_routing_params=False drops the k·e routing means from the
    parameter comparison (never exceeds dense then). LayerNorm, GELU and
    softmax arithmetic is excluded by convention.
    """
    s, e, h = spec.seq_len, spec.embed_dim, spec.hidden_dim
    dense_macs = _dense_model_macs(spec)
    dense_params = _dense_param_count(spec)
    if model is None or not model.layers:
        return CostReport(dense_macs, float(dense_macs), dense_macs, 0,
                          dense_params, dense_params)
    moe_macs = float(dense_macs)
    moe_worst = dense_macs
    moe_params = dense_params
    overhead = 0
    per_layer = {}
    dense_mlp = 2 * s * e * h
    for i, ml in sorted(model.layers.items()):
        sizes = np.asarray(ml.expert_sizes, np.int64)
        if routing_counts is not None and i in routing_counts:
            counts = np.asarray(routing_counts[i], np.float64)
            if counts.sum() <= 0:
                raise ValidationError(f"layer {i}: empty routing counts")
            expected_size = float(sizes @ counts) / counts.sum()
        else:
            expected_size = float(sizes.mean())
        route_macs = s * ml.k * e
        exp_mlp = route_macs + s * 2 * expected_size * e
        worst_mlp = route_macs + s * 2 * int(sizes.max()) * e
        moe_macs += exp_mlp - dense_mlp
        moe_worst += worst_mlp - dense_mlp
        overhead += route_macs
        kept = len(ml.kept_indices)
        layer_params = e * kept + kept + kept * e + e
        if include_routing_params:
            layer_params += ml.k * e
        dense_layer_params = e * h + h + h * e + e
        moe_params += layer_params - dense_layer_params
        per_layer[i] = {"k": ml.k, "kept": kept, "expert_sizes": sizes.tolist(),
                        "expected_size": expected_size,
                        "expected_mlp_macs": exp_mlp, "dense_mlp_macs": dense_mlp}
    return CostReport(dense_macs, moe_macs, moe_worst, overhead,
                      dense_params, moe_params, per_layer)


def moe_meta(model: MoeModel) -> dict:
    """JSON-safe metadata block describing the converted layers."""
    return {"metric": model.metric,
            "layers": {str(i): {
                "kept_indices": ml.kept_indices.tolist(),
                "experts": [e.tolist() for e in ml.experts],
                "member_counts": list(ml.member_counts),
                "has_raw_means": ml.raw_means is not None,
            } for i, ml in model.layers.items()}}


def moe_tensors(model: MoeModel) -> dict:
    """Flat tensor dict for the model file (means stored as tensors)."""
    out = dict(model.params)
    for i, ml in model.layers.items():
        out[f"blocks.{i}.moe.means"] = np.asarray(ml.means, np.float32)
        if ml.raw_means is not None:
            out[f"blocks.{i}.moe.raw_means"] = np.asarray(ml.raw_means, np.float32)
    return out


def moe_from_tensors(spec: ModelSpec, tensors: dict, meta: dict) -> MoeModel:
    params = {}
    layers = {}
    for i_str, d in meta.get("layers", {}).items():
        i = int(i_str)
        means = tensors.get(f"blocks.{i}.moe.means")
        if means is None:
            raise ValidationError(f"layer {i}: missing routing means tensor")
        raw = tensors.get(f"blocks.{i}.moe.raw_means")
        if d.get("has_raw_means") and raw is None:
            raise ValidationError(f"layer {i}: missing raw means tensor")
        ml = MoeLayer(layer=i,
                      kept_indices=np.asarray(d["kept_indices"], np.int64),
                      experts=[np.asarray(e, np.int64) for e in d["experts"]],
                      means=means, raw_means=raw,
                      member_counts=list(d.get("member_counts", [])))
        ml.validate(spec.hidden_dim)
        layers[i] = ml
    for name, arr in tensors.items():
        if ".moe.means" in name or ".moe.raw_means" in name:
            continue
        params[name] = arr
    model = MoeModel(spec=spec, params=params, layers=layers,
                     metric=meta.get("metric", "cosine"))
    _check_moe_param_shapes(model)
    return model


def _check_moe_param_shapes(model: MoeModel):
    spec = model.spec
    for i, ml in model.layers.items():
        m = f"blocks.{i}.moe."
        kept = len(ml.kept_indices)
        want = {m + "w1c": (spec.embed_dim, kept), m + "b1c": (kept,),
                m + "w2c": (kept, spec.embed_dim), m + "b2": (spec.embed_dim,)}
        for name, shape in want.items():
            if name not in model.params:
                raise ValidationError(f"missing tensor {name}")
            if tuple(model.params[name].shape) != shape:
                raise ValidationError(
                    f"tensor {name}: shape {model.params[name].shape}, want {shape}")
        b = f"blocks.{i}.mlp."
        for suf in ("w1", "b1", "w2", "b2"):
            if b + suf in model.params:
                raise ValidationError(f"layer {i} is both dense and MoE")
