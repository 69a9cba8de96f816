"""Run configuration: one JSON file drives the whole pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .clustering import ClusteringConfig
from .errors import ConfigError
from .extraction import ExtractionConfig
from .finetune import FinetuneConfig
from .vit import ModelSpec, OptimizerConfig


@dataclass
class DataConfig:
    kind: str = "synth"            # synth | idx
    n_train: int = 512
    n_eval: int = 256
    num_classes: int = 10
    noise: float = 0.08
    max_shift: int | None = None
    images_path: str | None = None
    labels_path: str | None = None
    eval_images_path: str | None = None
    eval_labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synth", "idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "synth" and (self.n_train < 1 or self.n_eval < 1):
            raise ConfigError("synth data needs n_train >= 1 and n_eval >= 1")
        if self.kind == "idx" and not (self.images_path and self.labels_path):
            raise ConfigError("idx data needs images_path and labels_path")


@dataclass
class CaptureConfig:
    layers: list = field(default_factory=list)
    n_tokens: int = 100000
    n_images: int | None = None    # convenience override; converted to tokens
    include_class_token: bool = False

    def images_needed(self, tokens_per_image: int) -> int:
        if self.n_images is not None:
            return self.n_images
        return -(-self.n_tokens // tokens_per_image)


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSpec = None
    data: DataConfig = field(default_factory=DataConfig)
    train: OptimizerConfig = field(default_factory=OptimizerConfig)
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    routing_metric: str = "cosine"
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        if self.model is None:
            raise ConfigError("config needs a 'model' section")
        if self.routing_metric not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown routing metric {self.routing_metric!r}")
        if not self.capture.layers:
            raise ConfigError("capture.layers must name at least one layer")
        bad = [l for l in self.capture.layers
               if l < 0 or l >= self.model.num_layers]
        if bad:
            raise ConfigError(f"capture layers {bad} outside [0, {self.model.num_layers})")
        tpi = self.tokens_per_image
        n_img = self.capture.images_needed(tpi)
        tokens = n_img * tpi
        mcs = self.clustering.derived_min_cluster_size(tokens)
        if tokens < mcs:
            raise ConfigError(
                f"capture of {tokens} tokens is below min_cluster_size {mcs}")

    @property
    def tokens_per_image(self) -> int:
        return self.model.seq_len if self.capture.include_class_token \
            else self.model.seq_len - 1

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "model": self.model.to_dict(),
             "data": asdict(self.data), "train": asdict(self.train),
             "capture": asdict(self.capture), "clustering": asdict(self.clustering),
             "extraction": asdict(self.extraction),
             "routing_metric": self.routing_metric,
             "finetune": asdict(self.finetune)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {"seed", "model", "data", "train", "capture", "clustering",
                 "extraction", "routing_metric", "finetune"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" not in d:
            raise ConfigError("config needs a 'model' section")
        try:
            model = ModelSpec.from_dict(d["model"])
            kwargs = {"seed": int(d.get("seed", 0)), "model": model,
                      "routing_metric": d.get("routing_metric", "cosine")}
            for name, klass in (("data", DataConfig), ("train", OptimizerConfig),
                                ("capture", CaptureConfig),
                                ("clustering", ClusteringConfig),
                                ("extraction", ExtractionConfig),
                                ("finetune", FinetuneConfig)):
                if name in d:
                    kwargs[name] = klass(**d[name])
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
