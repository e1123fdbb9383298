"""Query sets, sentence infusion, and the deformable decoder stack.

Queries are rows of width 2D: a position half followed by a content half.
Detection rows are learned tables, track rows are carried over from the
previous frame, and (optionally) a single referring row built from the
sentence embedding rides along through self-attention only. Every decoder
layer runs self-attention over all rows, deformable cross-attention into
the fused pyramid for the non-referring rows, and a residual MLP; a shared
three-branch head scores every non-referring row after every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Pyramid
from .losses import LayerPreds
from .nn import (
    Attention,
    BlockError,
    DeformableAttention,
    FeedForward,
    FFN3,
    Linear,
    Table,
    prefixed,
)
from .tensor import Tensor

KINDS = ("track", "det", "referring")
ADAPT_MODES = ("det", "track", "both")

# fresh detection anchors: centers spread over the frame, sizes near typical
_ANCHOR_SIZE_LOGIT = float(np.log(0.15 / 0.85))


def box_to_logits(box: np.ndarray) -> np.ndarray:
    """Inverse sigmoid of a box strictly inside (0,1)^4."""
    b = np.clip(np.asarray(box, dtype=np.float64), 1e-6, 1 - 1e-6)
    return np.log(b / (1.0 - b))


@dataclass
class QuerySet:
    """Ordered decoder queries: track rows, then detection rows, then at
    most one referring row."""

    rows: Tensor
    kinds: tuple[str, ...]
    ids: tuple[int | None, ...]
    anchor_logits: Tensor

    def __post_init__(self):
        m = self.rows.shape[0]
        if self.rows.ndim != 2 or self.rows.shape[1] % 2:
            raise BlockError(f"query rows must be [m, 2D], got {self.rows.shape}")
        if len(self.kinds) != m or len(self.ids) != m:
            raise BlockError("kinds/ids length must match row count")
        if self.anchor_logits.shape != (m, 4):
            raise BlockError(f"anchor logits shape {self.anchor_logits.shape} != {(m, 4)}")
        if not np.all(np.isfinite(self.anchor_logits.data)):
            raise BlockError("anchor logits must be finite")
        order = {"track": 0, "det": 1, "referring": 2}
        ranks = []
        for kind, ident in zip(self.kinds, self.ids):
            if kind not in order:
                raise BlockError(f"unknown query kind {kind!r}")
            if (ident is not None) != (kind == "track"):
                raise BlockError("exactly the track rows carry identities")
            ranks.append(order[kind])
        if ranks != sorted(ranks):
            raise BlockError("rows must be ordered track, det, referring")
        if self.kinds.count("referring") > 1:
            raise BlockError("at most one referring row")

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    @property
    def has_referring(self) -> bool:
        return bool(self.kinds) and self.kinds[-1] == "referring"

    @property
    def n_track(self) -> int:
        return self.kinds.count("track")

    @property
    def n_det(self) -> int:
        return self.kinds.count("det")

    @property
    def body_count(self) -> int:
        """Rows that see the pyramid and the head (everything non-referring)."""
        return self.n_track + self.n_det

    def track_ids(self) -> list[int]:
        return [i for i, k in zip(self.ids, self.kinds) if k == "track"]

    def anchors(self) -> Tensor:
        return T.sigmoid(self.anchor_logits)


@dataclass
class DecodeResult:
    """Per-layer scored predictions plus the final rows for downstream use."""

    layers: list[LayerPreds]
    rows: Tensor                  # final full row set, referring row included
    box_logits: Tensor            # final pre-sigmoid boxes for the body rows
    queries: QuerySet             # the input set (kinds/ids bookkeeping)
    attn_rows: list[Tensor] = field(default_factory=list)


class DecoderLayer:
    def __init__(self, rng: np.random.Generator, width: int, value_dim: int,
                 heads: int, levels: int, points: int):
        self.self_attn = Attention(rng, width, heads)
        self.deform = DeformableAttention(rng, width, value_dim, heads, levels,
                                          points, out_dim=width)
        self.ffn = FeedForward(rng, width)

    def __call__(self, rows: Tensor, body: int, centers: Tensor,
                 pyramid: Pyramid) -> Tensor:
        m = rows.shape[0]
        sa = self.self_attn(rows, rows, rows)
        deformed = self.deform(T.narrow(rows, 0, 0, body), centers, pyramid.pairs())
        if body < m:
            deformed = T.concat([deformed, T.narrow(rows, 0, body, m - body)], axis=0)
        z = deformed + sa
        return z + self.ffn(z)

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("self_attn", self.self_attn.params()),
                **prefixed("deform", self.deform.params()),
                **prefixed("ffn", self.ffn.params())}


class Decoder:
    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 4,
                 n_det: int = 30, depth: int = 3, levels: int = 4, points: int = 4):
        self.dim = dim
        self.width = 2 * dim
        self.n_det = n_det
        self.depth = depth
        self.det_position = Table(rng, n_det, dim)
        self.det_content = Table(rng, n_det, dim)
        anchors = np.empty((n_det, 4))
        anchors[:, :2] = rng.uniform(-2.0, 2.0, size=(n_det, 2))
        anchors[:, 2:] = _ANCHOR_SIZE_LOGIT
        self.det_anchor_logits = T.parameter(anchors)
        self.sentence_ffn = FFN3(rng, dim, dim, dim)
        self.adapt_attn = Attention(rng, self.width, heads)
        self.ref_ffn = FFN3(rng, dim, dim, dim)
        self.ref_position = T.uniform_init(rng, (1, dim), fan_in=dim)
        self.layers = [DecoderLayer(rng, self.width, dim, heads, levels, points)
                       for _ in range(depth)]
        self.cls_head = Linear(rng, self.width, 1)
        self.ref_head = Linear(rng, self.width, 1)
        self.box_head = FFN3(rng, self.width, self.width, 4)

    # ------------------------------------------------------------------
    # query construction

    def detection_queries(self) -> QuerySet:
        idx = np.arange(self.n_det)
        rows = T.concat([self.det_position(idx), self.det_content(idx)], axis=1)
        return QuerySet(rows, ("det",) * self.n_det, (None,) * self.n_det,
                        self.det_anchor_logits)

    def with_tracks(self, track_rows: Tensor | None, track_ids: list[int],
                    track_anchor_logits: Tensor | None) -> QuerySet:
        det = self.detection_queries()
        if track_rows is None or not track_ids:
            return det
        rows = T.concat([track_rows, det.rows], axis=0)
        anchors = T.concat([track_anchor_logits, det.anchor_logits], axis=0)
        kinds = ("track",) * len(track_ids) + det.kinds
        ids = tuple(track_ids) + det.ids
        return QuerySet(rows, kinds, ids, anchors)

    def embed_sentence(self, seed: Tensor) -> Tensor:
        """Trainable refinement of the frozen sentence seed, 1 x D."""
        if seed.shape != (1, self.dim):
            raise BlockError(f"sentence seed must be [1, {self.dim}]")
        return self.sentence_ffn(seed)

    # ------------------------------------------------------------------
    # sentence infusion

    def infuse_sentence(self, queries: QuerySet, s: Tensor, mode: str) -> QuerySet:
        """Add the sentence vector to the content half of mode-selected rows."""
        if queries.has_referring:
            raise BlockError("infusion happens before any referring row exists")
        if mode not in ADAPT_MODES:
            raise BlockError(f"mode must be one of {ADAPT_MODES}, got {mode!r}")
        picked = {"det": ("det",), "track": ("track",), "both": ("track", "det")}[mode]
        mask = np.array([[1.0 if k in picked else 0.0] for k in queries.kinds])
        mask_full = np.repeat(mask, queries.width, axis=1)
        pad = T.concat([T.tensor(np.zeros((1, self.dim))), s], axis=1)
        rows = queries.rows + T.tensor(mask_full) * pad
        return QuerySet(rows, queries.kinds, queries.ids, queries.anchor_logits)

    def adapt(self, queries: QuerySet, s: Tensor, mode: str,
              pe: Tensor | None = None) -> QuerySet:
        """Pre-decoder variant: infuse the sentence, then one self-attention
        pass (current-slot temporal encoding on queries and keys)."""
        infused = self.infuse_sentence(queries, s, mode)
        rows = self.adapt_attn(infused.rows, infused.rows, infused.rows,
                               pe_q=pe, pe_k=pe)
        return QuerySet(rows, queries.kinds, queries.ids, queries.anchor_logits)

    def attach_referring(self, queries: QuerySet, s: Tensor) -> QuerySet:
        """In-decoder variant: append one sentence-derived referring row."""
        if queries.has_referring:
            raise BlockError("referring row already present")
        row = T.concat([self.ref_position, self.ref_ffn(s)], axis=1)
        rows = T.concat([queries.rows, row], axis=0)
        anchors = T.concat([queries.anchor_logits, T.tensor(np.zeros((1, 4)))], axis=0)
        return QuerySet(rows, queries.kinds + ("referring",), queries.ids + (None,),
                        anchors)

    # ------------------------------------------------------------------
    # decoding

    def head(self, rows: Tensor, queries: QuerySet) -> tuple[LayerPreds, Tensor]:
        t, n = queries.n_track, queries.n_det
        body = T.narrow(rows, 0, 0, t + n)
        cls = T.sigmoid(self.cls_head(body))
        ref = T.sigmoid(self.ref_head(body))
        box_logits = self.box_head(body) + T.narrow(queries.anchor_logits, 0, 0, t + n)
        box = T.sigmoid(box_logits)
        preds = LayerPreds(
            det_cls=T.narrow(cls, 0, t, n),
            det_ref=T.narrow(ref, 0, t, n),
            det_box=T.narrow(box, 0, t, n),
            track_cls=T.narrow(cls, 0, 0, t),
            track_ref=T.narrow(ref, 0, 0, t),
            track_box=T.narrow(box, 0, 0, t),
            track_ids=queries.track_ids(),
        )
        return preds, box_logits

    def decode(self, queries: QuerySet, pyramid: Pyramid,
               depth: int | None = None) -> DecodeResult:
        depth = self.depth if depth is None else depth
        if not 1 <= depth <= self.depth:
            raise BlockError(f"depth must be in 1..{self.depth}, got {depth}")
        body = queries.body_count
        centers = T.narrow(T.sigmoid(T.narrow(queries.anchor_logits, 0, 0, body)),
                           1, 0, 2)
        rows = queries.rows
        layers_out: list[LayerPreds] = []
        box_logits = None
        kept_rows: list[Tensor] = []
        for layer in self.layers[:depth]:
            rows = layer(rows, body, centers, pyramid)
            kept_rows.append(rows)
            preds, box_logits = self.head(rows, queries)
            layers_out.append(preds)
        return DecodeResult(layers=layers_out, rows=rows, box_logits=box_logits,
                            queries=queries, attn_rows=kept_rows)

    def params(self) -> dict[str, Tensor]:
        out = {
            **prefixed("det_position", self.det_position.params()),
            **prefixed("det_content", self.det_content.params()),
            "det_anchor_logits": self.det_anchor_logits,
            **prefixed("sentence_ffn", self.sentence_ffn.params()),
            **prefixed("adapt_attn", self.adapt_attn.params()),
            **prefixed("ref_ffn", self.ref_ffn.params()),
            "ref_position": self.ref_position,
            **prefixed("cls_head", self.cls_head.params()),
            **prefixed("ref_head", self.ref_head.params()),
            **prefixed("box_head", self.box_head.params()),
        }
        for i, layer in enumerate(self.layers):
            out.update(prefixed(f"layer{i}", layer.params()))
        return out
