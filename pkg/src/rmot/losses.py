"""Set matching and the training loss stack.

The matcher is a shortest-augmenting-path Hungarian solver (O(n^3)) with a
lexicographic tie-break over the tight-edge graph, so ties resolve to the
smallest (prediction, target) pair list and runs stay reproducible.

Loss conventions:

* class and referring scores are probabilities, penalized with a focal term,
* boxes are (cx, cy, w, h) in [0,1], penalized with L1 + (1 - GIoU),
* gradients never flow through the discrete assignment; costs are computed
  on detached values and the assignment is then held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-12
AREA_EPS = 1e-12


class MatchError(ValueError):
    """Contract violation in matching or loss assembly."""


# ---------------------------------------------------------------------------
# hungarian matching


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of rows to columns.

    Returns min(p, t) pairs sorted by row index. Among all optimal
    assignments the lexicographically smallest pair list is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise MatchError(f"cost must be 2-d, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise MatchError("cost matrix contains non-finite entries")
    p, t = c.shape
    if p == 0 or t == 0:
        return []

    n = max(p, t)
    sq = np.zeros((n, n))
    sq[:p, :t] = c
    sq -= sq.min()  # uniform shift; every size-n matching moves by the same amount

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_row = np.zeros(n + 1, dtype=np.int64)  # column j (1-based) -> row, 0 = free
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = sq[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1

    # tight-edge graph: exactly the edges any optimal assignment may use
    reduced = sq - u[1:][:, None] - v[1:][None, :]
    tol = 1e-9 * max(1.0, float(np.abs(sq).max()))
    tight = reduced <= tol

    pairs = _lexicographic_tight_matching(tight, p, t)
    return pairs


def _lexicographic_tight_matching(tight: np.ndarray, p: int, t: int) -> list[tuple[int, int]]:
    """Greedy lexicographic selection over a square boolean graph known to
    admit a perfect matching; rows >= p and columns >= t are padding."""
    n = tight.shape[0]
    adj = [np.flatnonzero(tight[i]).tolist() for i in range(n)]

    def feasible(fixed_cols: dict[int, int], next_row: int) -> bool:
        # Kuhn's algorithm over the remaining rows
        col_owner = {c: r for r, c in fixed_cols.items()}
        match_of_col: dict[int, int] = {}

        def try_row(row, seen):
            for cc in adj[row]:
                if cc in col_owner or cc in seen:
                    continue
                seen.add(cc)
                if cc not in match_of_col or try_row(match_of_col[cc], seen):
                    match_of_col[cc] = row
                    return True
            return False

        for row in range(next_row, n):
            if not try_row(row, set()):
                return False
        return True

    chosen: dict[int, int] = {}
    for i in range(min(p, n)):
        placed = False
        real = [j for j in adj[i] if j < t and j not in chosen.values()]
        dummy = [j for j in adj[i] if j >= t and j not in chosen.values()]
        for j in real + dummy:
            trial = dict(chosen)
            trial[i] = j
            if feasible(trial, i + 1):
                chosen[i] = j
                placed = True
                break
        if not placed:
            raise MatchError("internal error: tight graph lost its perfect matching")
    return sorted((i, j) for i, j in chosen.items() if i < p and j < t)


# ---------------------------------------------------------------------------
# box geometry (numpy twins used for costs and evaluation)


def corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:4] / 2
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (cx, cy, w, h) box sets; degenerate boxes score 0."""
    ca, cb = corners(a), corners(b)
    x1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y2 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = np.clip(ca[:, 2] - ca[:, 0], 0, None) * np.clip(ca[:, 3] - ca[:, 1], 0, None)
    area_b = np.clip(cb[:, 2] - cb[:, 0], 0, None) * np.clip(cb[:, 3] - cb[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, AREA_EPS)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca, cb = corners(a), corners(b)
    x1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y2 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = np.clip(ca[:, 2] - ca[:, 0], 0, None) * np.clip(ca[:, 3] - ca[:, 1], 0, None)
    area_b = np.clip(cb[:, 2] - cb[:, 0], 0, None) * np.clip(cb[:, 3] - cb[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / np.maximum(union, AREA_EPS)
    hx1 = np.minimum(ca[:, None, 0], cb[None, :, 0])
    hy1 = np.minimum(ca[:, None, 1], cb[None, :, 1])
    hx2 = np.maximum(ca[:, None, 2], cb[None, :, 2])
    hy2 = np.maximum(ca[:, None, 3], cb[None, :, 3])
    hull = (hx2 - hx1) * (hy2 - hy1)
    return iou - (hull - union) / np.maximum(hull, AREA_EPS)


# ---------------------------------------------------------------------------
# differentiable loss terms


def focal(p: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal penalty on probabilities against a 0/1 target mask."""
    tgt = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = T.pow_const(1.0 - pc, gamma) * T.log(pc) * (-alpha)
    neg = T.pow_const(pc, gamma) * T.log(1.0 - pc) * (-(1.0 - alpha))
    return pos * tgt + neg * (1.0 - tgt)


def giou(pred: Tensor, target: Tensor) -> Tensor:
    """Generalized IoU per row for (cx, cy, w, h) tensors, in [-1, 1]."""
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise MatchError(f"giou shape mismatch {pred.shape} vs {target.shape}")

    def split(b):
        cx, cy = T.narrow(b, 1, 0, 1), T.narrow(b, 1, 1, 1)
        w, h = T.narrow(b, 1, 2, 1), T.narrow(b, 1, 3, 1)
        return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5

    ax1, ay1, ax2, ay2 = split(pred)
    bx1, by1, bx2, by2 = split(target)
    iw = T.relu(T.minimum(ax2, bx2) - T.maximum(ax1, bx1))
    ih = T.relu(T.minimum(ay2, by2) - T.maximum(ay1, by1))
    inter = iw * ih
    area_a = T.relu(ax2 - ax1) * T.relu(ay2 - ay1)
    area_b = T.relu(bx2 - bx1) * T.relu(by2 - by1)
    union = area_a + area_b - inter
    iou = inter / T.maximum(union, AREA_EPS)
    hull = (T.maximum(ax2, bx2) - T.minimum(ax1, bx1)) * (T.maximum(ay2, by2) - T.minimum(ay1, by1))
    return iou - (hull - union) / T.maximum(hull, AREA_EPS)


@dataclass
class LossWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_ref: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # the printed detection loss counts its class term twice for matched
    # queries; keep that literal behavior switchable for sensitivity checks
    dup_det_cls: bool = True


def box_loss(pred: Tensor, target: np.ndarray, w: LossWeights) -> Tensor:
    """L1 + GIoU box penalty summed over rows."""
    if pred.shape[0] == 0:
        return T.tensor(0.0)
    tgt = T.tensor(np.asarray(target, dtype=np.float64).reshape(-1, 4))
    l1 = T.tsum(T.absolute(pred - tgt))
    g = T.tsum(1.0 - giou(pred, tgt))
    return l1 * w.w_l1 + g * w.w_giou


# ---------------------------------------------------------------------------
# per-frame targets and predictions


@dataclass
class BoxTarget:
    ident: int
    box: np.ndarray  # (4,) cx cy w h, normalized
    referent: bool = False


@dataclass
class LayerPreds:
    """One decoder layer's scored outputs, split by query kind."""
    det_cls: Tensor
    det_ref: Tensor
    det_box: Tensor
    track_cls: Tensor
    track_ref: Tensor
    track_box: Tensor
    track_ids: list[int] = field(default_factory=list)


@dataclass
class FrameTargets:
    existing: list[BoxTarget] = field(default_factory=list)
    newborn: list[BoxTarget] = field(default_factory=list)


def pair_cost_matrix(cls_prob: np.ndarray, boxes: np.ndarray,
                     targets: list[BoxTarget], w: LossWeights) -> np.ndarray:
    """Detached matching cost: focal-style class cost + L1 + GIoU terms."""
    p = np.clip(np.asarray(cls_prob, dtype=np.float64).reshape(-1), PROB_EPS, 1 - PROB_EPS)
    pos = -w.focal_alpha * (1 - p) ** w.focal_gamma * np.log(p)
    neg = -(1 - w.focal_alpha) * p ** w.focal_gamma * np.log(1 - p)
    cls_cost = (pos - neg)[:, None]
    tgt_boxes = np.stack([t.box for t in targets]) if targets else np.zeros((0, 4))
    l1 = np.abs(np.asarray(boxes)[:, None, :] - tgt_boxes[None, :, :]).sum(axis=2)
    g = giou_matrix(np.asarray(boxes), tgt_boxes) if targets else np.zeros((len(p), 0))
    return w.w_cls * cls_cost + w.w_l1 * l1 + w.w_giou * (1.0 - g)


def match_targets(existing: list[BoxTarget], newborn: list[BoxTarget],
                  final_layer: bool, collab: bool) -> list[BoxTarget]:
    """Targets offered to detection queries at one decoder layer.

    With collaborative matching, intermediate layers offer existing and
    newborn targets alike; the final layer always offers newborns only.
    """
    if final_layer or not collab:
        return list(newborn)
    return list(existing) + list(newborn)


def detection_loss(preds: LayerPreds, targets: list[BoxTarget], w: LossWeights,
                   assignment: list[tuple[int, int]] | None = None):
    """Focal class term over all detection rows plus box terms for matched
    rows; returns (loss, assignment)."""
    n = preds.det_cls.shape[0]
    if assignment is None:
        if n and targets:
            cost = pair_cost_matrix(preds.det_cls.data, preds.det_box.data, targets, w)
            assignment = hungarian(cost)
        else:
            assignment = []
    cls_target = np.zeros((n, 1))
    for i, _ in assignment:
        cls_target[i, 0] = 1.0
    loss = T.tsum(focal(preds.det_cls, cls_target, w.focal_alpha, w.focal_gamma)) * w.w_cls
    if assignment:
        rows = [i for i, _ in assignment]
        tgt = np.stack([targets[j].box for _, j in assignment])
        matched_cls = T.gather_rows(preds.det_cls, rows)
        if w.dup_det_cls:
            loss = loss + T.tsum(focal(matched_cls, 1.0, w.focal_alpha, w.focal_gamma)) * w.w_cls
        loss = loss + box_loss(T.gather_rows(preds.det_box, rows), tgt, w)
    return loss, assignment


def track_loss(preds: LayerPreds, targets: FrameTargets, w: LossWeights) -> Tensor:
    """Identity-aligned loss for track rows; absent identities count as background."""
    k = preds.track_cls.shape[0]
    if k == 0:
        return T.tensor(0.0)
    by_id = {t.ident: t for t in targets.existing}
    cls_target = np.zeros((k, 1))
    ref_target = np.zeros((k, 1))
    present_rows: list[int] = []
    present_boxes: list[np.ndarray] = []
    for row, ident in enumerate(preds.track_ids):
        tgt = by_id.get(ident)
        if tgt is None:
            continue
        cls_target[row, 0] = 1.0
        ref_target[row, 0] = 1.0 if tgt.referent else 0.0
        present_rows.append(row)
        present_boxes.append(tgt.box)
    loss = T.tsum(focal(preds.track_cls, cls_target, w.focal_alpha, w.focal_gamma)) * w.w_cls
    loss = loss + T.tsum(focal(preds.track_ref, ref_target, w.focal_alpha, w.focal_gamma)) * w.w_ref
    if present_rows:
        loss = loss + box_loss(T.gather_rows(preds.track_box, present_rows),
                               np.stack(present_boxes), w)
    return loss


@dataclass
class LossReport:
    total: Tensor
    detection: float
    track: float
    temporal: float
    aux: list[float]
    final_assignment: list[tuple[int, int]]

    def component_sum(self) -> float:
        return self.detection + self.track + self.temporal + sum(self.aux)


def total_loss(layers: list[LayerPreds], targets: FrameTargets,
               refined_track_box: Tensor, refined_det_box: Tensor,
               w: LossWeights, collab: bool = True) -> LossReport:
    """Full per-frame objective.

    Final layer: track loss + newborn detection loss + temporal refinement
    loss on refined boxes. Every earlier layer contributes an auxiliary
    track + detection loss, with targets chosen by `match_targets`.
    """
    if not layers:
        raise MatchError("total_loss needs at least one decoder layer")
    final = layers[-1]
    lt = track_loss(final, targets, w)
    ld, pairs = detection_loss(final, match_targets(targets.existing, targets.newborn, True, collab), w)

    ltemp = T.tensor(0.0)
    by_id = {t.ident: t for t in targets.existing}
    rows = [r for r, ident in enumerate(final.track_ids) if ident in by_id]
    if rows:
        tgt = np.stack([by_id[final.track_ids[r]].box for r in rows])
        ltemp = ltemp + box_loss(T.gather_rows(refined_track_box, rows), tgt, w)
    if pairs:
        det_rows = [i for i, _ in pairs]
        tgt = np.stack([targets.newborn[j].box for _, j in pairs])
        ltemp = ltemp + box_loss(T.gather_rows(refined_det_box, det_rows), tgt, w)

    aux_losses = []
    for layer in layers[:-1]:
        la = track_loss(layer, targets, w)
        ldx, _ = detection_loss(layer, match_targets(targets.existing, targets.newborn, False, collab), w)
        aux_losses.append(la + ldx)

    total = ld + lt + ltemp
    for a in aux_losses:
        total = total + a
    return LossReport(
        total=total,
        detection=ld.item(),
        track=lt.item(),
        temporal=ltemp.item(),
        aux=[a.item() for a in aux_losses],
        final_assignment=pairs,
    )
