"""Higher Order Tracking Accuracy (HOTA) evaluation for referent tracks.

Protocol, frozen so the brute-force test oracle can mirror it exactly:

* Both sides are flat detection rows ``(frame, ident, box)`` with boxes in
  normalized ``(cx, cy, w, h)``. A duplicate ``(frame, ident)`` on either
  side is an input error, not a metric outcome.
* Per frame, detections are matched once by maximum total IoU (hungarian on
  ``1 - IoU``, lexicographic tie-break after sorting each side by ident).
  The same matching is reused for every localization threshold: a matched
  pair is a true positive at alpha iff its IoU >= alpha - 1e-12.
* Detection accuracy at alpha is TP / (TP + FN + FP). Association accuracy
  averages, over true positives, the Jaccard overlap of each matched
  identity pair: m / (g + p - m) where m counts frames the pair was a TP
  and g, p count frames the two idents exist at all.
* LocA at alpha is the mean IoU over true positives (0 when there are
  none). Aggregate metrics are means over the alpha grid, except HOTA
  itself which is recomputed as sqrt(DetA * AssA) from the aggregated
  factors so the defining identity survives averaging.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .losses import hungarian, iou_matrix

ALPHAS = tuple(round(i * 0.05, 2) for i in range(1, 20))
METRICS = ("hota", "det_a", "ass_a", "det_re", "det_pr", "ass_re", "ass_pr", "loc_a")
LABELS = ("HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA")
IOU_SLACK = 1e-12


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    hota: float
    det_a: float
    ass_a: float
    det_re: float
    det_pr: float
    ass_re: float
    ass_pr: float
    loc_a: float
    alphas: tuple
    per_alpha: dict
    n_gt: int
    n_pred: int

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in METRICS}
        out["alphas"] = list(self.alphas)
        out["per_alpha"] = {name: list(self.per_alpha[name]) for name in METRICS}
        out["n_gt"] = self.n_gt
        out["n_pred"] = self.n_pred
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [" ".join(f"{label:>9s}" for label in LABELS)]
        lines.append(" ".join(f"{getattr(self, name):9.6f}" for name in METRICS))
        lines.append("")
        lines.append(" ".join(f"{h:>9s}" for h in ("alpha",) + LABELS))
        for i, alpha in enumerate(self.alphas):
            row = [f"{alpha:9.2f}"]
            row += [f"{self.per_alpha[name][i]:9.6f}" for name in METRICS]
            lines.append(" ".join(row))
        return "\n".join(lines) + "\n"


def _group_by_frame(rows, side: str) -> dict:
    """Validate rows and bucket them per frame, sorted by ident."""
    frames: dict = defaultdict(list)
    seen = set()
    for frame, ident, box in rows:
        f, i = int(frame), int(ident)
        if (f, i) in seen:
            raise EvalError(f"duplicate {side} detection for frame {f}, id {i}")
        seen.add((f, i))
        b = np.asarray(box, dtype=np.float64).reshape(-1)
        if b.shape != (4,) or not np.all(np.isfinite(b)):
            raise EvalError(f"{side} box for frame {f}, id {i} is not a finite 4-vector")
        frames[f].append((i, b))
    for bucket in frames.values():
        bucket.sort(key=lambda entry: entry[0])
    return dict(frames)


def evaluate(gt_rows, pred_rows, alphas=ALPHAS) -> EvalReport:
    """Score predicted referent tracks against ground-truth referent tracks."""
    alphas = tuple(float(a) for a in alphas)
    if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
        raise EvalError(f"alphas must be a nonempty grid inside (0, 1), got {alphas}")
    gt = _group_by_frame(gt_rows, "ground-truth")
    pred = _group_by_frame(pred_rows, "predicted")

    n_alpha = len(alphas)
    tp = np.zeros(n_alpha)
    fn = np.zeros(n_alpha)
    fp = np.zeros(n_alpha)
    loc_sum = np.zeros(n_alpha)
    pair_count = [defaultdict(int) for _ in range(n_alpha)]
    gt_frames: dict = defaultdict(int)
    pred_frames: dict = defaultdict(int)

    for frame in sorted(set(gt) | set(pred)):
        g = gt.get(frame, [])
        p = pred.get(frame, [])
        for ident, _ in g:
            gt_frames[ident] += 1
        for ident, _ in p:
            pred_frames[ident] += 1
        if not g or not p:
            fn += len(g)
            fp += len(p)
            continue
        sim = iou_matrix(np.stack([b for _, b in g]), np.stack([b for _, b in p]))
        pairs = hungarian(1.0 - sim)
        sims = np.array([sim[r, c] for r, c in pairs])
        for ai, alpha in enumerate(alphas):
            keep = sims >= alpha - IOU_SLACK
            hits = int(keep.sum())
            tp[ai] += hits
            fn[ai] += len(g) - hits
            fp[ai] += len(p) - hits
            loc_sum[ai] += float(sims[keep].sum())
            for (r, c), ok in zip(pairs, keep):
                if ok:
                    pair_count[ai][(g[r][0], p[c][0])] += 1

    per = {name: np.zeros(n_alpha) for name in METRICS}
    for ai in range(n_alpha):
        t = tp[ai]
        per["det_re"][ai] = t / max(1.0, t + fn[ai])
        per["det_pr"][ai] = t / max(1.0, t + fp[ai])
        per["det_a"][ai] = t / max(1.0, t + fn[ai] + fp[ai])
        ass_a = ass_re = ass_pr = 0.0
        for (gid, pid), m in pair_count[ai].items():
            g_total, p_total = gt_frames[gid], pred_frames[pid]
            ass_a += m * (m / (g_total + p_total - m))
            ass_re += m * (m / g_total)
            ass_pr += m * (m / p_total)
        per["ass_a"][ai] = ass_a / max(1.0, t)
        per["ass_re"][ai] = ass_re / max(1.0, t)
        per["ass_pr"][ai] = ass_pr / max(1.0, t)
        per["loc_a"][ai] = loc_sum[ai] / t if t > 0 else 0.0
        per["hota"][ai] = math.sqrt(per["det_a"][ai] * per["ass_a"][ai])

    means = {name: float(np.mean(per[name])) for name in METRICS}
    means["hota"] = math.sqrt(means["det_a"] * means["ass_a"])
    return EvalReport(
        alphas=alphas,
        per_alpha={name: tuple(float(v) for v in per[name]) for name in METRICS},
        n_gt=sum(len(v) for v in gt.values()),
        n_pred=sum(len(v) for v in pred.values()),
        **means,
    )


# ---------------------------------------------------------------------------
# adapters: scenarios and scored tracker output


def scenario_referent_rows(scenario) -> list:
    """Ground-truth rows (frame, ident, box) for the scenario's referents."""
    by_id = {obj.ident: obj for obj in scenario.objects}
    rows = []
    for frame, idents in enumerate(scenario.referents):
        for ident in idents:
            rows.append((frame, ident, np.asarray(by_id[ident].boxes[frame], dtype=np.float64)))
    return rows


def filter_referents(records, obj_threshold: float, ref_threshold: float) -> list:
    """Keep scored records whose scores clear both thresholds, as plain rows."""
    for name, value in (("obj_threshold", obj_threshold), ("ref_threshold", ref_threshold)):
        if not 0.0 <= float(value) < 1.0:
            raise EvalError(f"{name} must lie in [0, 1), got {value}")
    return [
        (r.frame, r.ident, r.box)
        for r in records
        if r.obj_score > obj_threshold and r.ref_score > ref_threshold
    ]


def evaluate_scenarios(gt_row_sets, pred_row_sets, alphas=ALPHAS) -> EvalReport:
    """Pool per-scenario rows (same order on both sides) and evaluate once."""
    gt_sets = list(gt_row_sets)
    pred_sets = list(pred_row_sets)
    if len(gt_sets) != len(pred_sets):
        raise EvalError(f"got {len(gt_sets)} ground-truth row sets but {len(pred_sets)} prediction row sets")
    # Frame/id offsets must advance in lockstep on both sides, so base them
    # on the union extent of each scenario.
    gt_pool: list = []
    pred_pool: list = []
    frame_base = 0
    id_base = 0
    for gt_rows, pred_rows in zip(gt_sets, pred_sets):
        max_frame = -1
        max_id = -1
        for rows, pool in ((gt_rows, gt_pool), (pred_rows, pred_pool)):
            for frame, ident, box in rows:
                pool.append((frame_base + int(frame), id_base + int(ident), box))
                max_frame = max(max_frame, int(frame))
                max_id = max(max_id, int(ident))
        frame_base += max_frame + 1
        id_base += max_id + 1
    return evaluate(gt_pool, pred_pool, alphas)


def sweep_ref_thresholds(gt_row_sets, record_sets, ref_thresholds, obj_threshold=0.7, alphas=ALPHAS) -> list:
    """Re-filter scored records at each referring threshold and evaluate.

    Returns [(threshold, EvalReport), ...] in the given threshold order.
    """
    betas = [float(b) for b in ref_thresholds]
    if not betas:
        raise EvalError("ref_thresholds must be nonempty")
    out = []
    for beta in betas:
        pred_sets = [filter_referents(records, obj_threshold, beta) for records in record_sets]
        out.append((beta, evaluate_scenarios(gt_row_sets, pred_sets, alphas)))
    return out
