"""File formats: binary model files, IDX datasets, capture dumps, synthetic data.

Model file layout (little-endian):

    bytes 0..3    magic "MOEC"
    bytes 4..7    format version (u32)
    bytes 8..15   header length in bytes (u64)
    header        UTF-8 JSON: model spec, tensor manifest, optional MoE metadata
    payload       raw float32 tensors, each 64-byte aligned

Manifest offsets are relative to the payload start (itself 64-byte
aligned). Unknown header keys are ignored so newer writers stay loadable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import RngState, Tensor
from .vit import ModelSpec

MAGIC = b"MOEC"
FORMAT_VERSION = 1
ALIGN = 64


@dataclass
class DatasetHandle:
    images: Tensor          # (n, c, h, w) float32, normalized
    labels: np.ndarray      # (n,) int64
    class_names: list
    norm_mean: np.ndarray   # (c,) statistics used for normalization
    norm_std: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.images[idx], self.labels[idx], self.class_names,
                             self.norm_mean, self.norm_std)

    def denormalize(self, images: Tensor) -> Tensor:
        return images * self.norm_std[None, :, None, None] + self.norm_mean[None, :, None, None]


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _expected_dense_shapes(spec: ModelSpec) -> dict:
    e, h = spec.embed_dim, spec.hidden_dim
    shapes = {
        "patch_embed.w": (spec.patch_dim, e), "patch_embed.b": (e,),
        "cls_token": (1, 1, e), "pos_embed": (1, spec.seq_len, e),
        "norm.g": (e,), "norm.b": (e,),
        "head.w": (e, spec.num_classes), "head.b": (spec.num_classes,),
    }
    for i in range(spec.num_layers):
        b = f"blocks.{i}."
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[b + "attn." + nm] = (e, e)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[b + "attn." + nm] = (e,)
        for nm in ("ln1.g", "ln1.b", "ln2.g", "ln2.b"):
            shapes[b + nm] = (e,)
        shapes[b + "mlp.w1"] = (e, h)
        shapes[b + "mlp.b1"] = (h,)
        shapes[b + "mlp.w2"] = (h, e)
        shapes[b + "mlp.b2"] = (e,)
    return shapes


def save_model(path, spec: ModelSpec, tensors: dict, extra_meta: dict | None = None):
    """Write a model file; tensors is a flat name -> float32 array dict."""
    names = sorted(tensors)
    manifest = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        length = arr.nbytes
        manifest.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                         "offset": offset, "length": length})
        offset = _align(offset + length)
    header = {"spec": spec.to_dict(), "tensors": manifest}
    if extra_meta:
        header.update(extra_meta)
    hjson = json.dumps(header).encode("utf-8")
    data_start = _align(16 + len(hjson))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        f.write(b"\0" * (data_start - 16 - len(hjson)))
        pos = 0
        for name, entry in zip(names, manifest):
            f.write(b"\0" * (entry["offset"] - pos))
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            f.write(arr.astype("<f4", copy=False).tobytes())
            pos = entry["offset"] + entry["length"]


def load_model(path, check_dense_shapes: bool = True):
    """Read a model file back; returns (spec, tensors, header)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError(f"file too short ({len(blob)} bytes) for the 16-byte prologue")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise FormatError(f"header of {hlen} bytes overruns file of {len(blob)} bytes")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if "spec" not in header or "tensors" not in header:
        raise FormatError("header missing required 'spec'/'tensors' keys")
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"invalid model spec in header: {exc}") from exc
    data_start = _align(16 + hlen)
    tensors = {}
    spans = []
    for entry in header["tensors"]:
        name = entry["name"]
        if entry.get("dtype", "f32") != "f32":
            raise FormatError(f"tensor {name}: unsupported dtype {entry['dtype']}")
        shape = tuple(int(s) for s in entry["shape"])
        off, length = int(entry["offset"]), int(entry["length"])
        want = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != want:
            raise FormatError(f"tensor {name}: length {length} inconsistent with shape {shape}")
        lo, hi = data_start + off, data_start + off + length
        if off < 0 or hi > len(blob):
            raise FormatError(
                f"tensor {name}: payload [{lo}, {hi}) truncated (file has {len(blob)} bytes)")
        spans.append((lo, hi, name))
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=length // 4,
                                      offset=lo).reshape(shape).copy()
    spans.sort()
    for (lo1, hi1, n1), (lo2, hi2, n2) in zip(spans, spans[1:]):
        if lo2 < hi1:
            raise FormatError(f"manifest overlap: {n1} [{lo1},{hi1}) and {n2} [{lo2},{hi2})")
    if check_dense_shapes:
        expected = _expected_dense_shapes(spec)
        for name, arr in tensors.items():
            if name in expected and arr.shape != expected[name]:
                raise FormatError(
                    f"tensor {name}: shape {arr.shape} inconsistent with model spec "
                    f"(expected {expected[name]})")
    return spec, tensors, header


# ---------------------------------------------------------------------------
# IDX ingestion (MNIST-style files)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(images_path, labels_path) -> DatasetHandle:
    with open(images_path, "rb") as f:
        img_blob = f.read()
    with open(labels_path, "rb") as f:
        lbl_blob = f.read()
    if len(img_blob) < 16:
        raise FormatError(f"IDX image file too short ({len(img_blob)} bytes)")
    if len(lbl_blob) < 8:
        raise FormatError(f"IDX label file too short ({len(lbl_blob)} bytes)")
    (im_magic, n, h, w) = struct.unpack(">IIII", img_blob[:16])
    if im_magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"IDX image magic 0x{im_magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    (lb_magic, n_lbl) = struct.unpack(">II", lbl_blob[:8])
    if lb_magic != IDX_LABELS_MAGIC:
        raise FormatError(f"IDX label magic 0x{lb_magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if n != n_lbl:
        raise FormatError(f"IDX count mismatch: {n} images vs {n_lbl} labels")
    if len(img_blob) != 16 + n * h * w:
        raise FormatError(f"IDX image payload {len(img_blob) - 16} bytes, expected {n * h * w}")
    images = np.frombuffer(img_blob, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(lbl_blob, dtype=np.uint8, offset=8).astype(np.int64)
    images = images.astype(np.float32) / 255.0
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std < 1e-6, 1.0, std)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    names = [str(c) for c in range(int(labels.max()) + 1 if n else 0)]
    return DatasetHandle(images.astype(np.float32), labels, names,
                         mean.astype(np.float32), std.astype(np.float32))


# ---------------------------------------------------------------------------
# Synthetic shapes-and-colors dataset

_CLASS_NAMES = ["disk", "frame", "plus", "saltire", "hbars", "vbars",
                "checker", "ring", "wedge", "dots", "gradient", "rdial"]

_CLASS_COLORS = np.array([
    [1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.25, 0.35, 1.0], [1.0, 1.0, 0.2],
    [1.0, 0.3, 1.0], [0.2, 1.0, 1.0], [0.9, 0.6, 0.2], [0.6, 0.9, 0.5],
    [0.7, 0.4, 1.0], [0.95, 0.95, 0.95], [0.5, 0.8, 0.9], [0.9, 0.5, 0.6],
], dtype=np.float32)


def class_template(cls: int, size: int) -> np.ndarray:
    """Deterministic [0,1] intensity pattern for one class."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    r = np.sqrt((x - 0.5) ** 2 + (y - 0.5) ** 2)
    box = np.maximum(np.abs(x - 0.5), np.abs(y - 0.5))
    kind = cls % len(_CLASS_NAMES)
    if kind == 0:
        t = r < 0.33
    elif kind == 1:
        t = (box > 0.22) & (box < 0.4)
    elif kind == 2:
        t = (np.abs(x - 0.5) < 0.12) | (np.abs(y - 0.5) < 0.12)
    elif kind == 3:
        t = (np.abs(x - y) < 0.12) | (np.abs(x + y - 1) < 0.12)
    elif kind == 4:
        t = np.sin(2 * np.pi * 3 * y) > 0
    elif kind == 5:
        t = np.sin(2 * np.pi * 3 * x) > 0
    elif kind == 6:
        t = ((np.floor(x * 3.999) + np.floor(y * 3.999)) % 2) == 0
    elif kind == 7:
        t = (r > 0.2) & (r < 0.38)
    elif kind == 8:
        t = (y > x) & (y > 1 - x)
    elif kind == 9:
        fx = (x * 3.0) % 1.0
        fy = (y * 3.0) % 1.0
        t = ((fx - 0.5) ** 2 + (fy - 0.5) ** 2) < 0.22 ** 2
    elif kind == 10:
        t = x * (1 - y)
    else:
        t = np.clip(1.0 - 2.0 * r, 0, 1)
    t = t.astype(np.float64)
    if cls >= len(_CLASS_NAMES):
        t = 1.0 - t
    return t.astype(np.float32)


def synth_dataset(n: int, rng: RngState, image_size: int = 28, channels: int = 3,
                  num_classes: int = 10, noise: float = 0.08,
                  max_shift: int | None = None) -> DatasetHandle:
    """Procedurally generated labeled images, fully determined by the RngState."""
    if n < 1:
        raise ConfigError("synth_dataset needs n >= 1")
    if num_classes < 2 or num_classes > 2 * len(_CLASS_NAMES):
        raise ConfigError(f"num_classes must be in [2, {2 * len(_CLASS_NAMES)}]")
    if max_shift is None:
        max_shift = max(image_size // 14, 1)
    templates = np.stack([class_template(c, image_size) for c in range(num_classes)])
    labels = rng.integers(0, num_classes, n).astype(np.int64)
    shifts = rng.integers(-max_shift, max_shift + 1, (n, 2))
    amps = rng.uniform((n,), 0.85, 1.15).astype(np.float32)
    noise_arr = rng.normal((n, channels, image_size, image_size), noise)
    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    for i in range(n):
        t = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(0, 1)) * amps[i]
        if channels == 3:
            color = _CLASS_COLORS[labels[i] % len(_CLASS_COLORS)]
            images[i] = t[None] * color[:, None, None]
        else:
            images[i] = np.broadcast_to(t, (channels, image_size, image_size))
    images += noise_arr
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std < 1e-6, 1.0, std)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    names = [(_CLASS_NAMES[c % len(_CLASS_NAMES)] + ("-inv" if c >= len(_CLASS_NAMES) else ""))
             for c in range(num_classes)]
    return DatasetHandle(images.astype(np.float32), labels, names,
                         mean.astype(np.float32), std.astype(np.float32))


# ---------------------------------------------------------------------------
# Capture dumps (pipeline boundary between capture and extract)

def save_capture(path, records):
    np.savez(path, layer=records.layer, token_index=records.token_index,
             image_id=records.image_id, class_label=records.class_label,
             x=records.x, y=records.y)


def load_capture(path):
    from .vit import CaptureSet
    try:
        with np.load(path) as z:
            return CaptureSet(z["layer"], z["token_index"], z["image_id"],
                              z["class_label"], z["x"], z["y"])
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"unreadable capture file {path}: {exc}") from exc
