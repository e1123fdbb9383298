import numpy as np
import pytest

from rmot import tensor as T
from rmot.model import Model, ModelConfig, TrackInputs
from rmot.nn import BlockError
from rmot.temporal import MemoryBank
from rmot.world import tokenize


def tiny_config(**kw):
    base = dict(dim=8, heads=2, n_det=6, depth=2, enc_layers=1, levels=4,
                points=2, k_temporal=3, max_query_rows=16)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw):
    return Model(tiny_config(**kw), seed=seed)


def a_frame(seed=0):
    return np.random.default_rng(seed).uniform(0.1, 0.9, size=(64, 64, 3))


IDS = tokenize("the red car on the left")


def test_forward_frame_without_tracks():
    m = tiny_model()
    out = m.forward_frame(a_frame(), IDS)
    assert out.n_track == 0 and out.n_det == 6
    assert len(out.layers) == 2
    assert out.refined_boxes.shape == (6, 4)
    assert np.all((out.refined_boxes.data > 0) & (out.refined_boxes.data < 1))
    final = out.layers[-1]
    assert final.det_cls.shape == (6, 1)
    assert final.track_cls.shape == (0, 1)


def test_forward_frame_with_tracks_and_history():
    m = tiny_model(1)
    bank = MemoryBank(3)
    r = np.random.default_rng(2)
    rows = T.tensor(r.normal(size=(2, 16)))
    bank.push(4, T.tensor(r.normal(size=(1, 16))), 0)
    tracks = TrackInputs(rows=rows, ids=[4, 9],
                         anchor_logits=T.tensor(r.normal(scale=0.5, size=(2, 4))))
    out = m.forward_frame(a_frame(1), IDS, tracks, bank)
    assert out.n_track == 2
    assert out.refined_boxes.shape == (8, 4)
    assert out.layers[-1].track_ids == [4, 9]
    assert out.track_part(out.refined_boxes).shape == (2, 4)
    assert out.det_part(out.refined_boxes).shape == (6, 4)
    # history must matter: wiping the bank changes the track rows
    out2 = m.forward_frame(a_frame(1), IDS, tracks, MemoryBank(3))
    assert not np.array_equal(out.refined_rows.data[:1], out2.refined_rows.data[:1])


def test_sentence_fusion_variants_differ():
    outs = {}
    for variant in ("none", "pre", "in"):
        m = tiny_model(3, sentence_fusion=variant)
        outs[variant] = m.forward_frame(a_frame(3), IDS).refined_boxes.data
    assert not np.array_equal(outs["none"], outs["pre"])
    assert not np.array_equal(outs["none"], outs["in"])
    assert not np.array_equal(outs["pre"], outs["in"])
    for boxes in outs.values():
        assert boxes.shape == (6, 4)


def test_same_seed_same_outputs():
    a = tiny_model(7).forward_frame(a_frame(7), IDS).refined_boxes.data
    b = tiny_model(7).forward_frame(a_frame(7), IDS).refined_boxes.data
    assert np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(BlockError):
        tiny_config(sentence_fusion="maybe")
    with pytest.raises(BlockError):
        tiny_config(fusion_targets="all")
    with pytest.raises(BlockError):
        tiny_config(encoder_order="fused")
    with pytest.raises(BlockError):
        tiny_config(dim=0)


def test_params_cover_all_parts_uniquely():
    m = tiny_model()
    params = m.params()
    assert len(params) == len(set(params))
    for prefix in ("text.", "encoder.", "decoder.", "temporal."):
        assert any(k.startswith(prefix) for k in params)
    trainable = m.trainable_params()
    assert "text.table.table" in params and "text.table.table" not in trainable


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model(11)
    path = tmp_path / "model.bin"
    m.save(path, extras={"epoch": np.array(3.0)})
    other = tiny_model(99)
    before = other.forward_frame(a_frame(5), IDS).refined_boxes.data
    extras = other.load(path)
    assert extras["epoch"] == 3.0
    after = other.forward_frame(a_frame(5), IDS).refined_boxes.data
    want = m.forward_frame(a_frame(5), IDS).refined_boxes.data
    assert not np.array_equal(before, after)
    assert np.array_equal(after, want)


def test_checkpoint_dim_mismatch(tmp_path):
    m = tiny_model(12)
    path = tmp_path / "model.bin"
    m.save(path)
    with pytest.raises(BlockError):
        Model(tiny_config(dim=16), seed=0).load(path)
    with pytest.raises(BlockError):
        Model(tiny_config(n_det=7), seed=0).load(path)
