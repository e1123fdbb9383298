"""Teacher-forced sequence training with a hand-rolled AdamW.

One optimizer step per scenario: frames run in order on a single tape, track
queries carry forward the refined rows of ground-truth-matched objects, and
the summed per-frame objective backpropagates through the whole sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import BoxTarget, FrameTargets, LossWeights, MatchError, total_loss
from .model import FrameOutput, Model, TrackInputs
from .temporal import MemoryBank
from .tensor import Tensor
from .world import Scenario, render


class TrainError(RuntimeError):
    """Unrecoverable training failure (non-finite loss, bad inputs)."""


class AdamW:
    """Decoupled weight decay Adam on a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self._v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------------

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {"opt.step_count": np.array(float(self.step_count)),
               "opt.lr": np.array(self.lr)}
        for k in self.params:
            out[f"opt.m.{k}"] = self._m[k]
            out[f"opt.v.{k}"] = self._v[k]
        return out

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        self.step_count = int(entries["opt.step_count"])
        self.lr = float(entries["opt.lr"])
        for k in self.params:
            self._m[k] = np.array(entries[f"opt.m.{k}"], dtype=np.float64)
            self._v[k] = np.array(entries[f"opt.v.{k}"], dtype=np.float64)


# ---------------------------------------------------------------------------
# teacher-forced scenario rollout


def frame_targets(scenario: Scenario, frame: int, tracked_ids: list[int]) -> FrameTargets:
    """Split this frame's visible objects into tracked and newborn targets."""
    referents = set(scenario.referents[frame])
    tracked = set(tracked_ids)
    existing, newborn = [], []
    for obj in scenario.objects:
        box = obj.boxes[frame]
        if box is None:
            continue
        target = BoxTarget(obj.ident, np.asarray(box, dtype=np.float64),
                           referent=obj.ident in referents)
        (existing if obj.ident in tracked else newborn).append(target)
    return FrameTargets(existing=existing, newborn=newborn)


def promote_tracks(out: FrameOutput, assignment: list[tuple[int, int]],
                   targets: FrameTargets, bank: MemoryBank, frame: int,
                   ) -> TrackInputs | None:
    """Carry refined track rows forward and adopt matched newborn detections."""
    t = out.n_track
    rows, ids, anchors = [], [], []
    for i in range(t):
        rows.append(T.narrow(out.refined_rows, 0, i, 1))
        anchors.append(T.narrow(out.refined_logits, 0, i, 1))
        ids.append(out.queries.track_ids()[i])
    for det_row, j in sorted(assignment):
        rows.append(T.narrow(out.refined_rows, 0, t + det_row, 1))
        anchors.append(T.narrow(out.refined_logits, 0, t + det_row, 1))
        ids.append(targets.newborn[j].ident)
    if not ids:
        return None
    for row, ident in zip(rows, ids):
        bank.push(ident, row, frame)
    return TrackInputs(rows=T.concat(rows, axis=0), ids=ids,
                       anchor_logits=T.concat(anchors, axis=0))


def run_scenario(model: Model, scenario: Scenario, weights: LossWeights,
                 collab: bool = True) -> tuple[Tensor, list[dict]]:
    """Roll one scenario under teacher forcing; returns (mean frame loss, log)."""
    token_ids = scenario.expression.token_ids()
    bank = MemoryBank(model.config.k_temporal)
    tracks: TrackInputs | None = None
    total: Tensor | None = None
    per_frame = []
    for n in range(scenario.n_frames):
        targets = frame_targets(scenario, n, tracks.ids if tracks else [])
        out = model.forward_frame(render(scenario, n), token_ids, tracks, bank)
        try:
            report = total_loss(out.layers, targets,
                                out.track_part(out.refined_boxes),
                                out.det_part(out.refined_boxes),
                                weights, collab=collab)
        except MatchError as exc:
            raise TrainError(f"matching failed at scenario seed {scenario.seed} "
                             f"frame {n}: {exc}") from exc
        if not np.isfinite(report.total.data):
            raise TrainError(
                f"non-finite loss at scenario seed {scenario.seed} frame {n}: "
                f"detection={report.detection} track={report.track} "
                f"temporal={report.temporal} aux={report.aux}")
        per_frame.append({"frame": n, "loss": float(report.total.data),
                          "matched": len(report.final_assignment)})
        total = report.total if total is None else total + report.total
        tracks = promote_tracks(out, report.final_assignment, targets, bank, n)
    return total / float(scenario.n_frames), per_frame


@dataclass
class TrainSettings:
    epochs: int = 20
    lr: float = 1e-4
    decay_epoch: int = 15
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    collab: bool = True
    weights: LossWeights = field(default_factory=LossWeights)


def train(model: Model, scenarios: list[Scenario], settings: TrainSettings,
          optimizer: AdamW | None = None, start_epoch: int = 0,
          on_epoch=None) -> tuple[list[dict], AdamW]:
    """Optimize in place; returns (per-epoch history, optimizer)."""
    if not scenarios:
        raise TrainError("no scenarios to train on")
    opt = optimizer or AdamW(model.params(), lr=settings.lr,
                             weight_decay=settings.weight_decay)
    history = []
    for epoch in range(start_epoch, settings.epochs):
        opt.lr = settings.lr * (settings.decay_factor if epoch >= settings.decay_epoch else 1.0)
        losses = []
        for scenario in scenarios:
            with T.fresh_tape():
                loss, _ = run_scenario(model, scenario, settings.weights, settings.collab)
                T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr}
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return history, opt


def write_loss_curve(path, history: list[dict]) -> None:
    lines = ["epoch,loss,lr"]
    lines += [f"{h['epoch']},{h['loss']:.6f},{h['lr']:.8f}" for h in history]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
