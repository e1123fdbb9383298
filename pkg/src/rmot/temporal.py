"""Temporal reasoning: per-identity memory, history attention, box refinement.

Each live identity keeps a ring buffer of up to K refined query rows. At
every frame a track row attends over its own history (relative-age encoded),
all rows then exchange information once more, and a final MLP emits box
offsets applied in logit space so refined boxes stay inside the unit box.
"""

from __future__ import annotations

import re
from collections import deque

import numpy as np

from . import tensor as T
from .nn import Attention, BlockError, FFN3, Table, prefixed
from .tensor import Tensor


class MemoryBank:
    """Per-identity ring buffer of refined query rows with frame stamps."""

    def __init__(self, k: int = 5):
        if k < 1:
            raise BlockError("memory window must be at least 1")
        self.k = k
        self._store: dict[int, deque[tuple[int, Tensor]]] = {}

    def push(self, ident: int, row: Tensor, frame: int) -> None:
        if row.ndim != 2 or row.shape[0] != 1:
            raise BlockError("bank rows are [1, width]")
        entries = self._store.setdefault(ident, deque())
        if entries and frame <= entries[-1][0]:
            raise BlockError(f"frame stamp {frame} not newer than {entries[-1][0]}")
        entries.append((frame, row))
        while len(entries) > self.k:
            entries.popleft()

    def history(self, ident: int) -> list[Tensor]:
        """Stored rows for an identity, oldest to newest."""
        return [row for _, row in self._store.get(ident, ())]

    def frames(self, ident: int) -> list[int]:
        return [f for f, _ in self._store.get(ident, ())]

    def retire(self, ident: int) -> None:
        self._store.pop(ident, None)

    def identities(self) -> list[int]:
        return sorted(self._store)

    def clear(self) -> None:
        self._store.clear()

    # ------------------------------------------------------------------
    # checkpoint plumbing

    def state_entries(self, prefix: str = "bank") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for ident, entries in self._store.items():
            out[f"{prefix}.{ident}.rows"] = np.concatenate([r.data for _, r in entries])
            out[f"{prefix}.{ident}.frames"] = np.array([f for f, _ in entries], dtype=np.float64)
        return out

    @classmethod
    def from_state(cls, entries: dict[str, np.ndarray], k: int = 5,
                   prefix: str = "bank") -> "MemoryBank":
        bank = cls(k)
        pat = re.compile(rf"^{re.escape(prefix)}\.(-?\d+)\.rows$")
        for key, rows in entries.items():
            m = pat.match(key)
            if not m:
                continue
            ident = int(m.group(1))
            frames = entries[f"{prefix}.{ident}.frames"]
            for frame, row in zip(frames, np.atleast_2d(rows)):
                bank.push(ident, T.tensor(row.reshape(1, -1)), int(frame))
        return bank


class TemporalRefiner:
    """History attention + cross-query attention + logit-space box offsets.

    ``temporal_pos`` doubles as the current-slot encoding used by the
    pre-decoder sentence adaptation (slot 0 = current frame, slot a-1 =
    history entry of age a).
    """

    def __init__(self, rng: np.random.Generator, width: int, heads: int,
                 k: int = 5, max_rows: int = 64):
        self.k = k
        self.history_attn = Attention(rng, width, heads)
        self.temporal_pos = Table(rng, k, width)
        self.cross_attn = Attention(rng, width, heads)
        self.query_pos = Table(rng, max_rows, width)
        self.offset_ffn = FFN3(rng, width, width, 4)

    def current_slot(self) -> Tensor:
        return self.temporal_pos([0])

    # ------------------------------------------------------------------

    def refine_row(self, q: Tensor, history: list[Tensor]) -> Tensor:
        """Attend one query over its own past rows; no history, no change."""
        if not history:
            return q
        if len(history) > self.k:
            raise BlockError(f"history of {len(history)} exceeds window {self.k}")
        hist = T.concat(history, axis=0)
        ages = np.arange(len(history))[::-1]  # newest entry gets slot 0
        return self.history_attn(q, hist, hist,
                                 pe_q=self.temporal_pos([0]),
                                 pe_k=self.temporal_pos(ages))

    def cross_query_refine(self, rows: Tensor) -> Tensor:
        """One residual self-attention pass over all refined rows.

        Row-position encodings come from a bounded table; rows beyond its
        extent share the last slot.
        """
        m = rows.shape[0]
        if m < 1:
            raise BlockError("cross_query_refine needs at least one row")
        idx = np.minimum(np.arange(m), self.query_pos.rows - 1)
        pe = self.query_pos(idx)
        return rows + self.cross_attn(rows, rows, rows, pe_q=pe, pe_k=pe)

    def refine(self, rows: Tensor, histories: list[list[Tensor]]) -> Tensor:
        """Per-row history attention, then cross-query mixing, shape kept."""
        m = rows.shape[0]
        if len(histories) != m:
            raise BlockError("one history list per row required")
        refined = [self.refine_row(T.narrow(rows, 0, i, 1), histories[i])
                   for i in range(m)]
        return self.cross_query_refine(T.concat(refined, axis=0))

    def refine_boxes(self, rows: Tensor, box_logits: Tensor) -> tuple[Tensor, Tensor]:
        """Offset boxes in logit space; returns (boxes, logits), both [m,4]."""
        if box_logits.shape != (rows.shape[0], 4):
            raise BlockError(f"one box per row required, got {box_logits.shape}")
        logits = box_logits + self.offset_ffn(rows)
        return T.sigmoid(logits), logits

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("history_attn", self.history_attn.params()),
                **prefixed("temporal_pos", self.temporal_pos.params()),
                **prefixed("cross_attn", self.cross_attn.params()),
                **prefixed("query_pos", self.query_pos.params()),
                **prefixed("offset_ffn", self.offset_ffn.params())}
