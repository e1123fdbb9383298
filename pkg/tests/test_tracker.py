import numpy as np
import pytest

from rmot.model import Model, ModelConfig
from rmot.nn import BlockError
from rmot.tracker import Record, Tracker, TrackerConfig, csv_to_records, records_to_csv
from rmot.world import WorldError


EXPR = "the red car on the left"


def tiny_model(seed=0):
    cfg = ModelConfig(dim=8, heads=2, n_det=4, depth=2, enc_layers=1,
                      points=2, k_temporal=3, max_query_rows=24)
    return Model(cfg, seed=seed)


def frames(n, seed=0):
    r = np.random.default_rng(seed)
    return [r.uniform(0.1, 0.9, size=(64, 64, 3)) for _ in range(n)]


def bias_cls(model, value):
    model.decoder.cls_head.w.data[:] = 0.0
    model.decoder.cls_head.b.data[:] = value


def referent_ids(records):
    return {(r.frame, r.ident) for r in records if r.referent}


def test_config_validation():
    with pytest.raises(BlockError):
        TrackerConfig(obj_threshold=0.0)
    with pytest.raises(BlockError):
        TrackerConfig(ref_threshold=1.0)
    with pytest.raises(BlockError):
        TrackerConfig(miss_patience=0)


def test_suppressed_detections_produce_nothing():
    model = tiny_model()
    bias_cls(model, -10.0)
    tracker = Tracker(model, TrackerConfig())
    records = tracker.run_sequence(frames(3), EXPR)
    assert records == []
    assert tracker.tracks == []


def test_spawns_and_identity_growth():
    model = tiny_model(1)
    bias_cls(model, +10.0)
    tracker = Tracker(model, TrackerConfig(miss_patience=2))
    rec0 = tracker.step(frames(1)[0], EXPR)
    assert [r.ident for r in rec0] == [0, 1, 2, 3]
    assert all(r.frame == 0 for r in rec0)
    rec1 = tracker.step(frames(1, seed=5)[0], EXPR)
    # four persisting tracks plus four fresh spawns
    assert [r.ident for r in rec1] == list(range(8))
    assert all(r.obj_score > 0.7 for r in rec0 + rec1)
    for r in rec0 + rec1:
        assert r.referent == (r.ref_score > tracker.config.ref_threshold)


def test_miss_accrual_retirement_and_no_id_reuse():
    model = tiny_model(2)
    tracker = Tracker(model, TrackerConfig(miss_patience=2))
    bias_cls(model, +10.0)
    tracker.step(frames(1)[0], EXPR)
    assert len(tracker._live()) == 4
    bias_cls(model, -10.0)
    assert tracker.step(frames(1, 1)[0], EXPR) == []
    assert all(t.misses == 1 for t in tracker._live())
    assert tracker.step(frames(1, 2)[0], EXPR) == []
    assert tracker._live() == []
    assert tracker.bank.identities() == []
    bias_cls(model, +10.0)
    rec = tracker.step(frames(1, 3)[0], EXPR)
    assert min(r.ident for r in rec) == 4  # retired ids never come back


def test_referent_subset_and_threshold_monotonicity():
    model = tiny_model(3)
    seq = frames(4, seed=7)
    low = Tracker(model, TrackerConfig(obj_threshold=0.4, ref_threshold=0.2))
    high = Tracker(model, TrackerConfig(obj_threshold=0.4, ref_threshold=0.8))
    rec_low = low.run_sequence(seq, EXPR)
    rec_high = high.run_sequence(seq, EXPR)
    assert referent_ids(rec_high) <= referent_ids(rec_low)
    for r in rec_low:
        assert r.obj_score > 0.4
        assert r.referent == (r.ref_score > 0.2)


def test_prefix_causality_and_determinism():
    model = tiny_model(4)
    seq = frames(5, seed=11)
    cfg = TrackerConfig(obj_threshold=0.45, ref_threshold=0.3, miss_patience=2)
    full = Tracker(model, cfg).run_sequence(seq, EXPR)
    again = Tracker(model, cfg).run_sequence(seq, EXPR)
    assert len(full) == len(again)
    for a, b in zip(full, again):
        assert (a.frame, a.ident) == (b.frame, b.ident)
        assert np.array_equal(a.box, b.box)
        assert (a.obj_score, a.ref_score) == (b.obj_score, b.ref_score)
    prefix = Tracker(model, cfg).run_sequence(seq[:3], EXPR)
    head = [r for r in full if r.frame < 3]
    assert len(prefix) == len(head)
    for a, b in zip(prefix, head):
        assert (a.frame, a.ident, a.obj_score) == (b.frame, b.ident, b.obj_score)
        assert np.array_equal(a.box, b.box)
    assert sorted((r.frame, r.ident) for r in full) == [(r.frame, r.ident) for r in full]


def test_state_round_trip_resumes_identically(tmp_path):
    model = tiny_model(5)
    seq = frames(4, seed=13)
    cfg = TrackerConfig(obj_threshold=0.45, miss_patience=3)
    a = Tracker(model, cfg)
    rec_a = []
    for f in seq[:2]:
        rec_a.extend(a.step(f, EXPR))
    path = tmp_path / "state.bin"
    a.save_state(path)
    tail_a = []
    for f in seq[2:]:
        tail_a.extend(a.step(f, EXPR))

    b = Tracker(model, cfg)
    b.load_state(path)
    tail_b = []
    for f in seq[2:]:
        tail_b.extend(b.step(f, EXPR))
    assert len(tail_a) == len(tail_b)
    for x, y in zip(tail_a, tail_b):
        assert (x.frame, x.ident, x.obj_score, x.ref_score) == (y.frame, y.ident, y.obj_score, y.ref_score)
        assert np.array_equal(x.box, y.box)


def test_csv_round_trip_and_schema():
    records = [Record(0, 3, np.array([0.25, 0.5, 0.125, 0.0625]), 0.91, 0.37, True),
               Record(1, 3, np.array([0.3, 0.5, 0.125, 0.0625]), 0.88, 0.12, False)]
    text = records_to_csv(records)
    lines = text.strip().splitlines()
    assert lines[0] == "frame,id,cx,cy,w,h,obj_score,ref_score"
    assert lines[1] == "0,3,0.250000,0.500000,0.125000,0.062500,0.910000,0.370000"
    back = csv_to_records(text)
    assert [(r.frame, r.ident) for r in back] == [(0, 3), (1, 3)]
    assert np.allclose(back[0].box, records[0].box)
    with pytest.raises(BlockError):
        csv_to_records("bad,header\n1,2")


def test_bad_expression_rejected():
    tracker = Tracker(tiny_model(6))
    with pytest.raises(WorldError):
        tracker.step(frames(1)[0], "the purple wagon")
    with pytest.raises(BlockError):
        tracker.run_sequence([], EXPR)
