"""Bipartite matching and the detection/tracking loss stack.

Run with: python3 demos/matching_and_losses.py
"""

import itertools
import math

import numpy as np

from rmot import tensor as T
from rmot.losses import (
    BoxTarget,
    LayerPreds,
    LossWeights,
    detection_loss,
    focal,
    giou,
    hungarian,
    match_targets,
)


def exhaustive_minimum(cost):
    p, t = cost.shape
    best = math.inf
    for cols in itertools.permutations(range(t), min(p, t)):
        best = min(best, sum(cost[i, j] for i, j in zip(range(p), cols)))
    return best


def layer_preds(rng, n_det):
    def col(k):
        return T.tensor(rng.uniform(0.2, 0.8, size=(k, 1)))

    return LayerPreds(det_cls=col(n_det), det_ref=col(n_det),
                      det_box=T.tensor(rng.uniform(0.3, 0.7, size=(n_det, 4))),
                      track_cls=T.tensor(np.zeros((0, 1))),
                      track_ref=T.tensor(np.zeros((0, 1))),
                      track_box=T.tensor(np.zeros((0, 4))),
                      track_ids=[])


def main():
    rng = np.random.default_rng(2)

    # The assignment solver agrees with brute-force enumeration.
    cost = rng.normal(size=(5, 7))
    pairs = hungarian(cost)
    total = sum(cost[i, j] for i, j in pairs)
    print(f"hungarian total {total:.6f} == exhaustive {exhaustive_minimum(cost):.6f}")

    # Focal loss closed form at p = 0.5, positive target.
    with T.fresh_tape():
        p = T.tensor(np.array([[0.5]]))
        value = float(focal(p, 1.0).data[0, 0])
        print(f"focal(0.5, 1) = {value:.9f} (closed form {0.25 * 0.25 * math.log(2):.9f})")

        # GIoU is 1 for identical boxes and falls as boxes separate.
        a = T.tensor(np.array([[0.5, 0.5, 0.2, 0.2]]))
        for shift in (0.0, 0.1, 0.4):
            b = T.tensor(np.array([[0.5 + shift, 0.5, 0.2, 0.2]]))
            print(f"giou at shift {shift}: {float(giou(a, b).data[0]):+.4f}")

    # Collaborative matching: intermediate layers offer detection queries
    # to existing and newborn targets; the final layer is newborn-only.
    with T.fresh_tape():
        preds = layer_preds(rng, n_det=6)
        existing = [BoxTarget(0, np.array([0.3, 0.3, 0.1, 0.1])),
                    BoxTarget(1, np.array([0.7, 0.7, 0.1, 0.1]))]
        newborn = [BoxTarget(2, np.array([0.5, 0.5, 0.1, 0.1]))]
        weights = LossWeights()
        _, mid = detection_loss(preds, match_targets(existing, newborn, final_layer=False, collab=True), weights)
        _, last = detection_loss(preds, match_targets(existing, newborn, final_layer=True, collab=True), weights)
        print(f"existing 2 + newborn 1 -> intermediate matches {len(mid)}, final matches {len(last)}")


if __name__ == "__main__":
    main()
