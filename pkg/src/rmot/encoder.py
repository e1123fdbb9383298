"""Frame encoding: conv feature pyramid, deformable self-attention, word fusion.

A frame enters as an H x W x 3 raster and leaves as a four-level token
pyramid that has exchanged information across scales (deformable
self-attention) and with the expression (cross-attention to word vectors).
The order of those two stages is switchable; swapping it is one of the
ablation axes, with ``deform_first`` the default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import (
    Attention,
    BlockError,
    DeformableAttention,
    FeedForward,
    LayerNorm,
    Linear,
    Table,
    prefixed,
    sinusoid_pe2d,
)
from .tensor import Tensor
from .world import VOCABULARY

ORDERS = ("deform_first", "fuse_first")

MIN_FRAME = 32

# conv widths along the stem; levels tap the last four (strides 4/8/16/32)
_WIDTHS = (8, 16, 32, 64, 64)


@dataclass
class Pyramid:
    """Multi-scale stack of flattened token maps, one row per cell."""

    levels: list[Tensor]
    shapes: list[tuple[int, int]]

    def __post_init__(self):
        if not self.levels or len(self.levels) != len(self.shapes):
            raise BlockError("pyramid needs one shape per level and at least one level")
        dim = self.levels[0].shape[-1]
        for tokens, (h, w) in zip(self.levels, self.shapes):
            if tokens.shape != (h * w, dim):
                raise BlockError(f"level tokens {tokens.shape} do not match shape {(h, w)}")
        for (h0, w0), (h1, w1) in zip(self.shapes, self.shapes[1:]):
            if h1 >= h0 or w1 >= w0:
                raise BlockError("pyramid extents must strictly decrease per level")

    @property
    def dim(self) -> int:
        return self.levels[0].shape[-1]

    def pairs(self) -> list[tuple[Tensor, tuple[int, int]]]:
        return list(zip(self.levels, self.shapes))


def cell_centers(shape: tuple[int, int]) -> np.ndarray:
    """Normalized (x, y) centers of every cell of an h*w grid, row-major."""
    h, w = shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


class TextEncoder:
    """Frozen token table with a trainable projection on top.

    The frozen table stands in for a pretrained language model: token vectors
    and the sentence seed (their mean) receive no gradients, while the word
    projection trains with the rest of the network.
    """

    def __init__(self, rng: np.random.Generator, dim: int):
        self.table = Table(rng, len(VOCABULARY), dim, frozen=True)
        self.proj = Linear(rng, dim, dim)

    def word_features(self, token_ids: list[int]) -> Tensor:
        if not token_ids:
            raise BlockError("expression has no tokens")
        return self.proj(self.table(token_ids))

    def sentence_seed(self, token_ids: list[int]) -> Tensor:
        """Frozen 1 x D summary of the expression: mean of frozen token rows."""
        if not token_ids:
            raise BlockError("expression has no tokens")
        return T.tmean(self.table(token_ids), axis=0, keepdims=True)

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("table", self.table.params()),
                **prefixed("proj", self.proj.params())}


class Backbone:
    """Strided conv stack emitting a four-level pyramid at strides 4..32.

    Each 3x3 stride-2 convolution runs as im2col + matmul; the last four
    stages are projected to the shared model width by 1x1 convolutions.
    """

    def __init__(self, rng: np.random.Generator, dim: int):
        widths = (3,) + _WIDTHS
        self.convs = [Linear(rng, 9 * widths[i], widths[i + 1]) for i in range(len(_WIDTHS))]
        self.projs = [Linear(rng, c, dim) for c in _WIDTHS[1:]]

    def __call__(self, frame) -> Pyramid:
        if isinstance(frame, Tensor):
            x = frame
        else:
            arr = np.asarray(frame, dtype=np.float64)
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise BlockError(f"frame must be HxWx3, got {arr.shape}")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise BlockError("frame values must lie in [0,1]")
            x = T.tensor(arr)
        h, w = x.shape[0], x.shape[1]
        if h < MIN_FRAME or w < MIN_FRAME:
            raise BlockError(f"frame {h}x{w} below minimum {MIN_FRAME}x{MIN_FRAME}")

        levels: list[Tensor] = []
        shapes: list[tuple[int, int]] = []
        for i, conv in enumerate(self.convs):
            h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
            x = T.relu(conv(T.im2col(x, kernel=3, stride=2, pad=1)))
            if i >= 1:
                levels.append(self.projs[i - 1](x))
                shapes.append((h, w))
            x = T.reshape(x, (h, w, x.shape[-1]))
        return Pyramid(levels, shapes)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.convs):
            out.update(prefixed(f"conv{i}", conv.params()))
        for i, proj in enumerate(self.projs):
            out.update(prefixed(f"proj{i}", proj.params()))
        return out


class WordFusion:
    """Adds language into every pyramid level via cross-attention.

    One attention block is shared across levels. Queries are cell tokens
    under a fixed sinusoidal grid encoding, keys are word vectors under a
    learned position table, values are the raw word vectors; the attention
    output is added residually so zeroing the value path is an exact no-op.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, max_words: int = 16):
        self.attn = Attention(rng, dim, heads)
        self.word_pos = Table(rng, max_words, dim)

    def __call__(self, pyramid: Pyramid, words: Tensor) -> Pyramid:
        if words.ndim != 2 or words.shape[0] < 1:
            raise BlockError("word features must be a nonempty [L, D] tensor")
        pe_words = self.word_pos(np.arange(words.shape[0]))
        fused = [
            tokens + self.attn(tokens, words, words,
                               pe_q=sinusoid_pe2d(h, w, pyramid.dim), pe_k=pe_words)
            for tokens, (h, w) in pyramid.pairs()
        ]
        return Pyramid(fused, list(pyramid.shapes))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("attn", self.attn.params()),
                **prefixed("word_pos", self.word_pos.params())}


class EncoderLayer:
    """Deformable self-attention across the whole pyramid, then an MLP.

    Every cell is a query with its own center as reference point, sampling
    all levels. Both stages are residual with layernorm.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 levels: int, points: int):
        self.deform = DeformableAttention(rng, dim, dim, heads, levels, points)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, pyramid: Pyramid) -> Pyramid:
        x = T.concat(pyramid.levels, axis=0)
        refs = T.tensor(np.concatenate([cell_centers(s) for s in pyramid.shapes]))
        y = self.norm1(x + self.deform(x, refs, pyramid.pairs()))
        z = self.norm2(y + self.ffn(y))
        levels, start = [], 0
        for h, w in pyramid.shapes:
            levels.append(T.narrow(z, 0, start, h * w))
            start += h * w
        return Pyramid(levels, list(pyramid.shapes))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("deform", self.deform.params()),
                **prefixed("norm1", self.norm1.params()),
                **prefixed("ffn", self.ffn.params()),
                **prefixed("norm2", self.norm2.params())}


class FrameEncoder:
    """Backbone plus the switchable deform/fuse encoding pipeline."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 4,
                 layers: int = 2, levels: int = 4, points: int = 4):
        self.backbone = Backbone(rng, dim)
        self.layers = [EncoderLayer(rng, dim, heads, levels, points) for _ in range(layers)]
        self.fusion = WordFusion(rng, dim, heads)

    def self_encode(self, pyramid: Pyramid) -> Pyramid:
        for layer in self.layers:
            pyramid = layer(pyramid)
        return pyramid

    def encode(self, pyramid: Pyramid, words: Tensor, order: str = "deform_first") -> Pyramid:
        if order not in ORDERS:
            raise BlockError(f"order must be one of {ORDERS}, got {order!r}")
        if order == "deform_first":
            return self.fusion(self.self_encode(pyramid), words)
        return self.self_encode(self.fusion(pyramid, words))

    def params(self) -> dict[str, Tensor]:
        out = prefixed("backbone", self.backbone.params())
        for i, layer in enumerate(self.layers):
            out.update(prefixed(f"layer{i}", layer.params()))
        out.update(prefixed("fusion", self.fusion.params()))
        return out
