"""Online per-frame tracking: query lifecycle, thresholds, referent emission.

The tracker owns the mutable state (live tracks, memory bank, id counter)
and drives a trained model one frame at a time. A detection above the
object threshold spawns a track that participates from the next frame on;
a track below it accrues misses and retires after `miss_patience` in a row.
Referents are the currently visible tracks whose referring score clears the
referring threshold, no post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Model, TrackInputs
from .nn import BlockError
from .temporal import MemoryBank
from .tensor import Tensor
from .world import tokenize


@dataclass
class TrackerConfig:
    obj_threshold: float = 0.7
    ref_threshold: float = 0.3
    miss_patience: int = 5

    def __post_init__(self):
        if not (0.0 < self.obj_threshold < 1.0 and 0.0 < self.ref_threshold < 1.0):
            raise BlockError("thresholds must lie strictly inside (0,1)")
        if self.miss_patience < 1:
            raise BlockError("miss_patience must be at least 1")


@dataclass
class TrackState:
    ident: int
    row: Tensor
    anchor_logits: Tensor
    birth: int
    misses: int = 0
    alive: bool = True


@dataclass
class Record:
    frame: int
    ident: int
    box: np.ndarray
    obj_score: float
    ref_score: float
    referent: bool


CSV_HEADER = "frame,id,cx,cy,w,h,obj_score,ref_score"


def records_to_csv(records: list[Record]) -> str:
    lines = [CSV_HEADER]
    for r in records:
        cx, cy, w, h = (float(v) for v in r.box)
        lines.append(f"{r.frame},{r.ident},{cx:.6f},{cy:.6f},{w:.6f},{h:.6f},"
                     f"{r.obj_score:.6f},{r.ref_score:.6f}")
    return "\n".join(lines) + "\n"


def csv_to_records(text: str) -> list[Record]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise BlockError(f"prediction CSV must start with header {CSV_HEADER!r}")
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 8:
            raise BlockError(f"malformed prediction row: {ln!r}")
        frame, ident = int(parts[0]), int(parts[1])
        box = np.array([float(v) for v in parts[2:6]])
        records.append(Record(frame, ident, box, float(parts[6]), float(parts[7]),
                              referent=False))
    return records


class Tracker:
    def __init__(self, model: Model, config: TrackerConfig | None = None):
        self.model = model
        self.config = config or TrackerConfig()
        self.reset()

    def reset(self) -> None:
        self.tracks: list[TrackState] = []
        self.bank = MemoryBank(self.model.config.k_temporal)
        self.next_id = 0
        self.frame_index = 0

    # ------------------------------------------------------------------

    def _live(self) -> list[TrackState]:
        return [t for t in self.tracks if t.alive]

    def step(self, frame, expression: str) -> list[Record]:
        """Process one frame; returns this frame's visible-object records.

        Referent records are the subset with `referent=True`.
        """
        token_ids = tokenize(expression)
        cfg = self.config
        with T.no_grad():
            live = self._live()
            tracks_in = None
            if live:
                tracks_in = TrackInputs(
                    rows=T.concat([t.row for t in live], axis=0),
                    ids=[t.ident for t in live],
                    anchor_logits=T.concat([t.anchor_logits for t in live], axis=0))
            out = self.model.forward_frame(frame, token_ids, tracks_in, self.bank)
            final = out.layers[-1]
            boxes = out.refined_boxes.data
            records: list[Record] = []

            for i, state in enumerate(live):
                obj = float(final.track_cls.data[i, 0])
                ref = float(final.track_ref.data[i, 0])
                state.row = T.narrow(out.refined_rows, 0, i, 1)
                state.anchor_logits = T.narrow(out.refined_logits, 0, i, 1)
                if obj > cfg.obj_threshold:
                    state.misses = 0
                    self.bank.push(state.ident, state.row, self.frame_index)
                    records.append(Record(self.frame_index, state.ident,
                                          boxes[i].copy(), obj, ref,
                                          referent=ref > cfg.ref_threshold))
                else:
                    state.misses += 1
                    if state.misses >= cfg.miss_patience:
                        state.alive = False
                        self.bank.retire(state.ident)

            t = len(live)
            for i in range(out.n_det):
                obj = float(final.det_cls.data[i, 0])
                if obj <= cfg.obj_threshold:
                    continue
                ref = float(final.det_ref.data[i, 0])
                ident = self.next_id
                self.next_id += 1
                state = TrackState(
                    ident=ident,
                    row=T.narrow(out.refined_rows, 0, t + i, 1),
                    anchor_logits=T.narrow(out.refined_logits, 0, t + i, 1),
                    birth=self.frame_index)
                self.tracks.append(state)
                self.bank.push(ident, state.row, self.frame_index)
                records.append(Record(self.frame_index, ident, boxes[t + i].copy(),
                                      obj, ref, referent=ref > cfg.ref_threshold))

        self.frame_index += 1
        return sorted(records, key=lambda r: r.ident)

    def run_sequence(self, frames: list, expression: str) -> list[Record]:
        """Reset, track every frame, return records sorted by (frame, id)."""
        if not frames:
            raise BlockError("run_sequence needs at least one frame")
        self.reset()
        records: list[Record] = []
        for frame in frames:
            records.extend(self.step(frame, expression))
        return sorted(records, key=lambda r: (r.frame, r.ident))

    # ------------------------------------------------------------------
    # resumable state

    def save_state(self, path) -> None:
        entries: dict[str, np.ndarray] = {
            "cursor": np.array([float(self.frame_index), float(self.next_id)])}
        for state in self._live():
            entries[f"track.{state.ident}.row"] = state.row.data
            entries[f"track.{state.ident}.anchor"] = state.anchor_logits.data
            entries[f"track.{state.ident}.meta"] = np.array(
                [float(state.misses), float(state.birth)])
        entries.update(self.bank.state_entries())
        T.save_tensors(path, entries)

    def load_state(self, path) -> None:
        entries = T.load_tensors(path)
        self.reset()
        self.frame_index = int(entries["cursor"][0])
        self.next_id = int(entries["cursor"][1])
        idents = sorted(int(k.split(".")[1]) for k in entries
                        if k.startswith("track.") and k.endswith(".row"))
        for ident in idents:
            meta = entries[f"track.{ident}.meta"]
            self.tracks.append(TrackState(
                ident=ident,
                row=T.tensor(entries[f"track.{ident}.row"]),
                anchor_logits=T.tensor(entries[f"track.{ident}.anchor"]),
                birth=int(meta[1]),
                misses=int(meta[0])))
        self.bank = MemoryBank.from_state(entries, k=self.model.config.k_temporal)
