import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmot import tensor as T
from rmot.nn import BlockError
from rmot.temporal import MemoryBank, TemporalRefiner


def rng(seed=0):
    return np.random.default_rng(seed)


def refiner(seed=0, width=16, heads=2, k=5):
    return TemporalRefiner(rng(seed), width, heads, k=k, max_rows=8)


# ---------------------------------------------------------------------------
# history attention


def test_empty_history_is_identity():
    tr = refiner()
    q = T.tensor(rng(1).normal(size=(1, 16)))
    out = tr.refine_row(q, [])
    assert out is q


def test_identical_history_rows_act_as_one():
    tr = refiner()
    r = rng(2)
    q = T.tensor(r.normal(size=(1, 16)))
    h = T.tensor(r.normal(size=(1, 16)))
    single = tr.refine_row(q, [h])
    triple = tr.refine_row(q, [h.copy(), h.copy(), h.copy()])
    assert np.allclose(single.data, triple.data, atol=1e-12)


def test_history_longer_than_window_rejected():
    tr = refiner(k=2)
    q = T.tensor(rng(3).normal(size=(1, 16)))
    hist = [T.tensor(rng(i).normal(size=(1, 16))) for i in range(3)]
    with pytest.raises(BlockError):
        tr.refine_row(q, hist)
    out = tr.refine_row(q, hist[:2])
    assert out.shape == (1, 16)


# ---------------------------------------------------------------------------
# cross-query attention


def test_single_row_cross_refine_is_value_residual():
    tr = refiner(4)
    row = T.tensor(rng(5).normal(size=(1, 16)))
    got = tr.cross_query_refine(row).data
    att = tr.cross_attn
    want = (row + att.proj_out(att.proj_v(row))).data
    assert np.allclose(got, want, atol=1e-12)
    with pytest.raises(BlockError):
        tr.cross_query_refine(T.tensor(np.zeros((0, 16))))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=9999))
def test_cross_refine_preserves_row_count(m, seed):
    tr = refiner(6)
    rows = T.tensor(np.random.default_rng(seed).normal(size=(m, 16)))
    assert tr.cross_query_refine(rows).shape == (m, 16)


# ---------------------------------------------------------------------------
# box refinement


def test_zero_offset_ffn_keeps_boxes():
    tr = refiner(7)
    for lin in (tr.offset_ffn.l1, tr.offset_ffn.l2, tr.offset_ffn.l3):
        lin.w.data[:] = 0.0
        lin.b.data[:] = 0.0
    rows = T.tensor(rng(8).normal(size=(4, 16)))
    logits = T.tensor(rng(9).normal(size=(4, 4)))
    boxes, out_logits = tr.refine_boxes(rows, logits)
    assert np.array_equal(out_logits.data, logits.data)
    assert np.array_equal(boxes.data, T.sigmoid(logits).data)


def test_refined_boxes_stay_in_unit_box():
    tr = refiner(10)
    rows = T.tensor(rng(11).normal(scale=3.0, size=(6, 16)))
    logits = T.tensor(rng(12).normal(scale=5.0, size=(6, 4)))
    boxes, _ = tr.refine_boxes(rows, logits)
    assert np.all((boxes.data > 0) & (boxes.data < 1))
    with pytest.raises(BlockError):
        tr.refine_boxes(rows, T.tensor(np.zeros((5, 4))))


# ---------------------------------------------------------------------------
# gradients


def test_temporal_gradients():
    tr = refiner(13)
    r = rng(14)
    hist = [T.tensor(r.normal(size=(1, 16))) for _ in range(3)]
    wq = r.normal(size=(1, 16))

    def f_row(q):
        return T.tsum(tr.refine_row(q, hist) * T.tensor(wq))

    assert T.grad_check(f_row, T.tensor(r.normal(size=(1, 16)))) <= 1e-4

    def f_hist(h):
        return T.tsum(tr.refine_row(T.tensor(wq), [T.narrow(h, 0, i, 1) for i in range(3)])
                      * T.tensor(wq))

    assert T.grad_check(f_hist, T.tensor(r.normal(size=(3, 16)))) <= 1e-4

    wm = r.normal(size=(4, 16))

    def f_cross(rows):
        return T.tsum(tr.cross_query_refine(rows) * T.tensor(wm))

    assert T.grad_check(f_cross, T.tensor(r.normal(size=(4, 16)))) <= 1e-4

    logits = T.tensor(r.normal(size=(4, 4)))
    wb = r.normal(size=(4, 4))

    def f_box(rows):
        boxes, _ = tr.refine_boxes(rows, logits)
        return T.tsum(boxes * T.tensor(wb))

    assert T.grad_check(f_box, T.tensor(r.normal(size=(4, 16)))) <= 1e-4

    hists = [[], [T.tensor(r.normal(size=(1, 16)))], []]

    def f_full(rows):
        out = tr.refine(rows, hists)
        boxes, _ = tr.refine_boxes(out, T.tensor(np.zeros((3, 4))))
        return T.tsum(boxes * T.tensor(wb[:3]))

    assert T.grad_check(f_full, T.tensor(r.normal(size=(3, 16)))) <= 1e-4


# ---------------------------------------------------------------------------
# memory bank


def test_bank_window_and_eviction():
    bank = MemoryBank(k=5)
    for f in range(6):
        bank.push(3, T.tensor(np.full((1, 4), float(f))), f)
    assert bank.frames(3) == [1, 2, 3, 4, 5]
    assert len(bank.history(3)) == 5
    assert bank.history(3)[0].data[0, 0] == 1.0


def test_bank_stale_stamp_and_retire():
    bank = MemoryBank(k=3)
    bank.push(1, T.tensor(np.zeros((1, 4))), 5)
    with pytest.raises(BlockError):
        bank.push(1, T.tensor(np.zeros((1, 4))), 5)
    with pytest.raises(BlockError):
        bank.push(1, T.tensor(np.zeros((1, 4))), 2)
    bank.push(2, T.tensor(np.ones((1, 4))), 0)
    assert bank.identities() == [1, 2]
    bank.retire(1)
    assert bank.identities() == [2]
    assert bank.history(1) == []


def test_bank_state_round_trip(tmp_path):
    r = rng(15)
    bank = MemoryBank(k=4)
    for ident in (2, 7):
        for f in range(3):
            bank.push(ident, T.tensor(r.normal(size=(1, 6))), f * 2)
    path = tmp_path / "bank.bin"
    T.save_tensors(path, bank.state_entries())
    loaded = MemoryBank.from_state(T.load_tensors(path), k=4)
    assert loaded.identities() == bank.identities()
    for ident in (2, 7):
        assert loaded.frames(ident) == bank.frames(ident)
        for a, b in zip(loaded.history(ident), bank.history(ident)):
            assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# integrated refine


def test_refine_mixes_tracks_and_fresh_rows():
    tr = refiner(16)
    r = rng(17)
    rows = T.tensor(r.normal(size=(5, 16)))
    hists = [[T.tensor(r.normal(size=(1, 16))) for _ in range(2)], [], [], [], []]
    out = tr.refine(rows, hists)
    assert out.shape == (5, 16)
    with pytest.raises(BlockError):
        tr.refine(rows, hists[:3])
