"""Full model assembly: one object owning encoder, decoder, and temporal parts.

`forward_frame` is the whole per-frame pipeline: raster frame -> pyramid ->
text-fused encoding -> sentence-adapted queries -> decoder stack -> temporal
refinement -> refined boxes. Track queries and the memory bank are passed in
and returned by the caller (trainer or tracker), keeping the model stateless
across frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .decoder import Decoder, DecodeResult, QuerySet
from .encoder import FrameEncoder, Pyramid, TextEncoder, ORDERS
from .losses import LayerPreds
from .nn import BlockError
from .temporal import MemoryBank, TemporalRefiner
from .tensor import Tensor

SENTENCE_FUSION = ("none", "pre", "in")
FUSION_TARGETS = ("det", "track", "both")


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 4
    n_det: int = 30
    depth: int = 3            # decoder layers (auxiliary losses come from all but the last)
    enc_layers: int = 2
    levels: int = 4
    points: int = 4
    k_temporal: int = 5
    max_query_rows: int = 64
    sentence_fusion: str = "pre"
    fusion_targets: str = "both"
    encoder_order: str = "deform_first"

    def __post_init__(self):
        if self.sentence_fusion not in SENTENCE_FUSION:
            raise BlockError(f"sentence_fusion must be one of {SENTENCE_FUSION}")
        if self.fusion_targets not in FUSION_TARGETS:
            raise BlockError(f"fusion_targets must be one of {FUSION_TARGETS}")
        if self.encoder_order not in ORDERS:
            raise BlockError(f"encoder_order must be one of {ORDERS}")
        if min(self.dim, self.heads, self.n_det, self.depth, self.enc_layers,
               self.levels, self.points, self.k_temporal) < 1:
            raise BlockError("all model dims must be positive")


@dataclass
class TrackInputs:
    """Carried track queries: one row, identity, and anchor per live track."""

    rows: Tensor
    ids: list[int]
    anchor_logits: Tensor

    def __post_init__(self):
        if self.rows.shape[0] != len(self.ids) or self.anchor_logits.shape[0] != len(self.ids):
            raise BlockError("track inputs disagree on track count")


@dataclass
class FrameOutput:
    decode: DecodeResult
    refined_rows: Tensor      # [t+n, 2D] after temporal refinement
    refined_boxes: Tensor     # [t+n, 4]
    refined_logits: Tensor    # [t+n, 4]

    @property
    def layers(self) -> list[LayerPreds]:
        return self.decode.layers

    @property
    def queries(self) -> QuerySet:
        return self.decode.queries

    @property
    def n_track(self) -> int:
        return self.decode.queries.n_track

    @property
    def n_det(self) -> int:
        return self.decode.queries.n_det

    def track_part(self, x: Tensor) -> Tensor:
        return T.narrow(x, 0, 0, self.n_track)

    def det_part(self, x: Tensor) -> Tensor:
        return T.narrow(x, 0, self.n_track, self.n_det)


class Model:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.text = TextEncoder(rng, cfg.dim)
        self.encoder = FrameEncoder(rng, cfg.dim, heads=cfg.heads, layers=cfg.enc_layers,
                                    levels=cfg.levels, points=cfg.points)
        self.decoder = Decoder(rng, cfg.dim, heads=cfg.heads, n_det=cfg.n_det,
                               depth=cfg.depth, levels=cfg.levels, points=cfg.points)
        self.temporal = TemporalRefiner(rng, 2 * cfg.dim, cfg.heads,
                                        k=cfg.k_temporal, max_rows=cfg.max_query_rows)

    # ------------------------------------------------------------------

    def embed_sentence(self, token_ids: list[int]) -> Tensor:
        return self.decoder.embed_sentence(self.text.sentence_seed(token_ids))

    def encode_frame(self, frame, token_ids: list[int]) -> Pyramid:
        words = self.text.word_features(token_ids)
        return self.encoder.encode(self.encoder.backbone(frame), words,
                                   order=self.config.encoder_order)

    def build_queries(self, tracks: TrackInputs | None, sentence: Tensor) -> QuerySet:
        cfg = self.config
        if tracks is None or not tracks.ids:
            q = self.decoder.with_tracks(None, [], None)
        else:
            q = self.decoder.with_tracks(tracks.rows, tracks.ids, tracks.anchor_logits)
        if cfg.sentence_fusion == "pre":
            q = self.decoder.adapt(q, sentence, cfg.fusion_targets,
                                   pe=self.temporal.current_slot())
        elif cfg.sentence_fusion == "in":
            q = self.decoder.attach_referring(q, sentence)
        return q

    def forward_frame(self, frame, token_ids: list[int],
                      tracks: TrackInputs | None = None,
                      bank: MemoryBank | None = None) -> FrameOutput:
        fused = self.encode_frame(frame, token_ids)
        sentence = self.embed_sentence(token_ids)
        queries = self.build_queries(tracks, sentence)
        result = self.decoder.decode(queries, fused)

        body = queries.body_count
        body_rows = T.narrow(result.rows, 0, 0, body)
        histories: list[list[Tensor]] = []
        for ident in queries.track_ids():
            histories.append(bank.history(ident) if bank is not None else [])
        histories.extend([] for _ in range(queries.n_det))
        refined = self.temporal.refine(body_rows, histories)
        boxes, logits = self.temporal.refine_boxes(refined, result.box_logits)
        return FrameOutput(decode=result, refined_rows=refined,
                           refined_boxes=boxes, refined_logits=logits)

    # ------------------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, part in (("text", self.text), ("encoder", self.encoder),
                             ("decoder", self.decoder), ("temporal", self.temporal)):
            for k, v in part.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if v.requires_grad}

    # ------------------------------------------------------------------
    # checkpoints

    _META_FIELDS = ("dim", "heads", "n_det", "depth", "enc_layers", "levels",
                    "points", "k_temporal", "max_query_rows")

    def save(self, path, extras: dict[str, np.ndarray] | None = None) -> None:
        entries: dict[str, np.ndarray | Tensor] = {
            f"model.{k}": v for k, v in self.params().items()
        }
        for name in self._META_FIELDS:
            entries[f"meta.{name}"] = np.array(float(getattr(self.config, name)))
        for k, v in (extras or {}).items():
            entries[f"extra.{k}"] = v
        T.save_tensors(path, entries)

    def load(self, path) -> dict[str, np.ndarray]:
        """Restore parameters in place; returns the checkpoint's extra entries."""
        entries = T.load_tensors(path)
        for name in self._META_FIELDS:
            stored = entries.get(f"meta.{name}")
            if stored is not None and float(stored) != float(getattr(self.config, name)):
                raise BlockError(
                    f"checkpoint {name}={float(stored):g} does not match "
                    f"model {name}={getattr(self.config, name)}")
        params = self.params()
        for k, p in params.items():
            key = f"model.{k}"
            if key not in entries:
                raise BlockError(f"checkpoint is missing parameter {k}")
            if entries[key].shape != p.data.shape:
                raise BlockError(f"checkpoint shape {entries[key].shape} != "
                                 f"{p.data.shape} for {k}")
            p.data[...] = entries[key]
        return {k[len("extra."):]: v for k, v in entries.items() if k.startswith("extra.")}

    def config_dict(self) -> dict:
        return asdict(self.config)
