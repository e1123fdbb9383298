"""Flat key=value run configuration shared by every CLI command.

Every key has a default, so an absent file is a valid configuration. Files
hold one ``key = value`` per line with ``#`` comments; command-line
overrides reuse the same syntax. Values are coerced to the default's type
and range checks live in the dataclasses built from the resolved config.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .losses import LossWeights
from .model import ModelConfig
from .tracker import TrackerConfig
from .train import TrainSettings
from .world import WorldParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    dim: int = 32
    heads: int = 4
    n_det: int = 30
    depth: int = 3
    enc_layers: int = 2
    levels: int = 4
    points: int = 4
    k_temporal: int = 5
    max_query_rows: int = 64
    sentence_fusion: str = "pre"
    fusion_targets: str = "both"
    encoder_order: str = "deform_first"
    # losses and matching
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_ref: float = 2.0
    collab: bool = True
    # tracker
    obj_threshold: float = 0.7
    ref_threshold: float = 0.3
    miss_patience: int = 5
    # training
    epochs: int = 20
    lr: float = 1e-4
    decay_epoch: int = 15
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 0
    # synthetic world
    n_frames: int = 20
    canvas: int = 64
    min_objects: int = 2
    max_objects: int = 6
    spawn_rate: float = 0.3
    scenarios: int = 200
    dataset_seed: int = 7
    # paths
    dataset: str = "data/scenarios.jsonl"
    checkpoint: str = "runs/model.ckpt"
    out_dir: str = "runs"

    def apply(self, key: str, raw: str) -> None:
        key = key.strip()
        for f in fields(self):
            if f.name == key:
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(self, key)
        text = raw.strip()
        try:
            if isinstance(current, bool):
                lowered = text.lower()
                if lowered not in ("true", "false", "1", "0"):
                    raise ValueError(text)
                value = lowered in ("true", "1")
            elif isinstance(current, int):
                value = int(text)
            elif isinstance(current, float):
                value = float(text)
            else:
                value = text
        except ValueError:
            raise ConfigError(f"cannot parse {key} = {raw!r} as {type(current).__name__}") from None
        setattr(self, key, value)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                lines = open(path, encoding="utf-8").read().splitlines()
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from None
            for lineno, line in enumerate(lines, 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
                key, raw = stripped.split("=", 1)
                cfg.apply(key, raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            cfg.apply(key, raw)
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    # targets consumed elsewhere; their constructors do the range checking

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            heads=self.heads,
            n_det=self.n_det,
            depth=self.depth,
            enc_layers=self.enc_layers,
            levels=self.levels,
            points=self.points,
            k_temporal=self.k_temporal,
            max_query_rows=self.max_query_rows,
            sentence_fusion=self.sentence_fusion,
            fusion_targets=self.fusion_targets,
            encoder_order=self.encoder_order,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(w_cls=self.w_cls, w_l1=self.w_l1, w_giou=self.w_giou, w_ref=self.w_ref)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            lr=self.lr,
            decay_epoch=self.decay_epoch,
            decay_factor=self.decay_factor,
            weight_decay=self.weight_decay,
            collab=self.collab,
            weights=self.loss_weights(),
        )

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            obj_threshold=self.obj_threshold,
            ref_threshold=self.ref_threshold,
            miss_patience=self.miss_patience,
        )

    def world_params(self) -> WorldParams:
        return WorldParams(
            n_frames=self.n_frames,
            canvas=self.canvas,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            spawn_rate=self.spawn_rate,
        )
