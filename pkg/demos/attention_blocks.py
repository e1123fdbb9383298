"""Multi-head attention and deformable pyramid sampling in isolation.

Run with: python3 demos/attention_blocks.py
"""

import numpy as np

from rmot import tensor as T
from rmot.encoder import cell_centers
from rmot.nn import Attention, DeformableAttention, sinusoid_pe2d


def main():
    rng = np.random.default_rng(0)
    dim = 16

    # Positional encodings enter the query/key projections only, so two
    # queries with identical content but different positions attend
    # differently while the mixed values stay position-free.
    attn = Attention(rng, dim, heads=2)
    with T.fresh_tape():
        content = T.tensor(np.tile(rng.normal(size=(1, dim)), (4, 1)))
        keys = T.tensor(rng.normal(size=(6, dim)))
        pe_q = sinusoid_pe2d(2, 2, dim)
        out_with_pe = attn(content, keys, keys, pe_q=pe_q)
        out_plain = attn(content, keys, keys)
        print("rows identical without PE:", np.allclose(out_plain.data[0], out_plain.data[1]))
        print("rows differ with PE:      ", not np.allclose(out_with_pe.data[0], out_with_pe.data[1]))

    # Deformable attention reads a few bilinear samples per level around
    # each query's normalized reference point instead of all positions.
    deform = DeformableAttention(rng, query_dim=dim, value_dim=dim, heads=2, levels=2, points=3)
    with T.fresh_tape():
        pyramid = [
            (T.tensor(rng.normal(size=(16, dim))), (4, 4)),
            (T.tensor(rng.normal(size=(4, dim))), (2, 2)),
        ]
        queries = T.tensor(rng.normal(size=(5, dim)), requires_grad=True)
        refs = T.tensor(cell_centers((5, 1)))
        out, weights = deform(queries, refs, pyramid, return_weights=True)
        print("deformable output shape:", out.shape)
        print("per-query sample weights sum to 1:",
              np.allclose(weights.reshape(5, -1).sum(axis=1), 2.0))  # one simplex per head

        err = T.grad_check(lambda q: T.tsum(deform(q, refs, pyramid)), queries)
        print(f"gradient error through sampling: {err:.2e}")


if __name__ == "__main__":
    main()
