"""Neural building blocks: projections, attention, deformable sampling.

Every block owns its parameters as Tensors, exposes them through
``params()`` as a flat name->Tensor dict (used for checkpoints and the
optimizer), and is a plain callable on Tensors. Initialization is uniform
in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and zero for biases.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class BlockError(ValueError):
    """Contract violation in a network block."""


def prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w = T.uniform_init(rng, (d_in, d_out), fan_in=d_in)
        self.b = T.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class FFN3:
    """Exactly three linear layers with ReLU between them, none after the last."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.l1 = Linear(rng, d_in, d_hidden)
        self.l2 = Linear(rng, d_hidden, d_hidden)
        self.l3 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(T.relu(self.l2(T.relu(self.l1(x)))))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("l1", self.l1), ("l2", self.l2), ("l3", self.l3)):
            out.update(prefixed(name, layer.params()))
        return out


class FeedForward:
    """Two-layer MLP used inside encoder and decoder layers."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int | None = None):
        hidden = 2 * dim if hidden is None else hidden
        self.l1 = Linear(rng, dim, hidden)
        self.l2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(T.relu(self.l1(x)))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("l1", self.l1.params()), **prefixed("l2", self.l2.params())}


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(dim))
        self.bias = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class Attention:
    """Multi-head scaled dot-product attention.

    Positional encodings are added to the query and key inputs before their
    projections; values are projected from the raw value rows only.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise BlockError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.proj_q = Linear(rng, dim, dim)
        self.proj_k = Linear(rng, dim, dim)
        self.proj_v = Linear(rng, dim, dim)
        self.proj_out = Linear(rng, dim, dim)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor,
                 pe_q: Tensor | None = None, pe_k: Tensor | None = None) -> Tensor:
        if queries.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise BlockError(f"attention dim mismatch: {queries.shape} / {keys.shape} vs {self.dim}")
        if keys.shape[0] != values.shape[0]:
            raise BlockError("keys and values must have the same row count")
        q_in = queries + pe_q if pe_q is not None else queries
        k_in = keys + pe_k if pe_k is not None else keys
        m, n = queries.shape[0], keys.shape[0]
        h, dh = self.heads, self.head_dim
        qh = T.permute(T.reshape(self.proj_q(q_in), (m, h, dh)), (1, 0, 2))
        kh = T.permute(T.reshape(self.proj_k(k_in), (n, h, dh)), (1, 0, 2))
        vh = T.permute(T.reshape(self.proj_v(values), (n, h, dh)), (1, 0, 2))
        scores = T.bmm(qh, T.permute(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        weights = T.softmax(scores, axis=2)
        mixed = T.bmm(weights, vh)
        out = T.reshape(T.permute(mixed, (1, 0, 2)), (m, self.dim))
        return self.proj_out(out)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("q", self.proj_q), ("k", self.proj_k),
                            ("v", self.proj_v), ("out", self.proj_out)):
            out.update(prefixed(name, layer.params()))
        return out


class DeformableAttention:
    """Sparse multi-scale attention: each query samples `points` learned
    locations per head per pyramid level and mixes them with softmax weights.

    Sampling offsets are predicted in cell units of each level, so one
    parameterization serves all scales. Samples outside a map read zeros.
    """

    def __init__(self, rng: np.random.Generator, query_dim: int, value_dim: int,
                 heads: int, levels: int, points: int, out_dim: int | None = None):
        if value_dim % heads:
            raise BlockError(f"value_dim {value_dim} not divisible by heads {heads}")
        self.query_dim = query_dim
        self.value_dim = value_dim
        self.heads = heads
        self.levels = levels
        self.points = points
        self.head_dim = value_dim // heads
        self.out_dim = query_dim if out_dim is None else out_dim
        self.offset_pred = Linear(rng, query_dim, heads * levels * points * 2)
        self.weight_pred = Linear(rng, query_dim, heads * levels * points)
        self.proj_value = Linear(rng, value_dim, value_dim)
        self.proj_out = Linear(rng, value_dim, self.out_dim)

    def __call__(self, queries: Tensor, ref_points: Tensor,
                 pyramid: list[tuple[Tensor, tuple[int, int]]],
                 return_weights: bool = False):
        if len(pyramid) != self.levels:
            raise BlockError(f"expected {self.levels} pyramid levels, got {len(pyramid)}")
        if queries.shape[-1] != self.query_dim:
            raise BlockError(f"query dim {queries.shape} vs {self.query_dim}")
        if ref_points.shape != (queries.shape[0], 2):
            raise BlockError(f"ref_points shape {ref_points.shape}")
        if np.any(ref_points.data < 0) or np.any(ref_points.data > 1):
            raise BlockError("reference points outside [0,1]^2")
        m = queries.shape[0]
        h, lv, p, dh = self.heads, self.levels, self.points, self.head_dim

        offsets = T.reshape(self.offset_pred(queries), (m, h, lv, p, 2))
        weights = T.softmax(T.reshape(self.weight_pred(queries), (m, h, lv * p)), axis=2)
        refs = T.reshape(T.repeat_axis(T.reshape(ref_points, (m, 1, 2)), 1, h * p), (m, h, p, 2))

        sampled: list[list[Tensor]] = [[] for _ in range(h)]
        for l, (tokens, (hh, ww)) in enumerate(pyramid):
            if tokens.shape != (hh * ww, self.value_dim):
                raise BlockError(f"level {l} tokens shape {tokens.shape} vs {(hh * ww, self.value_dim)}")
            values = self.proj_value(tokens)
            off_l = T.reshape(T.narrow(offsets, 2, l, 1), (m, h, p, 2))
            pts_l = refs + off_l * T.tensor([1.0 / ww, 1.0 / hh])
            for hi in range(h):
                pts = T.reshape(T.narrow(pts_l, 1, hi, 1), (m * p, 2))
                val_h = T.narrow(values, 1, hi * dh, dh)
                rows = T.bilinear_gather(val_h, pts, (hh, ww))
                sampled[hi].append(T.reshape(rows, (m, p, dh)))

        head_outs = []
        for hi in range(h):
            samp = T.concat(sampled[hi], axis=1)
            w_h = T.narrow(weights, 1, hi, 1)
            head_outs.append(T.reshape(T.bmm(w_h, samp), (m, dh)))
        out = self.proj_out(T.concat(head_outs, axis=1))
        if return_weights:
            return out, weights.data
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("offsets", self.offset_pred), ("weights", self.weight_pred),
                            ("value", self.proj_value), ("out", self.proj_out)):
            out.update(prefixed(name, layer.params()))
        return out


class Table:
    """Trainable lookup table of row vectors, optionally frozen."""

    def __init__(self, rng: np.random.Generator, rows: int, dim: int, frozen: bool = False):
        self.rows = rows
        self.data = T.uniform_init(rng, (rows, dim), fan_in=dim)
        if frozen:
            self.data.requires_grad = False

    def __call__(self, indices) -> Tensor:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.rows):
            raise BlockError(f"table index out of range 0..{self.rows - 1}")
        return T.gather_rows(self.data, idx)

    def params(self) -> dict[str, Tensor]:
        return {"table": self.data}


def sinusoid_pe2d(h: int, w: int, dim: int) -> Tensor:
    """Fixed 2-d sinusoidal position encoding for an h*w grid, row-major."""
    if dim % 4:
        raise BlockError("sinusoid_pe2d needs dim divisible by 4")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(0, half, 2) / half)
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    parts = []
    for g in (gx, gy):
        ang = g.reshape(-1, 1) * freqs
        parts.append(np.stack([np.sin(ang), np.cos(ang)], axis=2).reshape(h * w, half))
    return Tensor(np.concatenate(parts, axis=1))
