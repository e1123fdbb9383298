import numpy as np
import pytest

from rmot import tensor as T
from rmot import world as W
from rmot.losses import LossWeights
from rmot.model import Model, ModelConfig
from rmot.train import (AdamW, TrainError, TrainSettings, frame_targets,
                        run_scenario, train, write_loss_curve)


def tiny_model(seed=0):
    cfg = ModelConfig(dim=8, heads=2, n_det=6, depth=2, enc_layers=1,
                      points=2, k_temporal=3, max_query_rows=16)
    return Model(cfg, seed=seed)


def tiny_scenario(seed=0, n_frames=4, spawn_rate=0.5):
    params = W.WorldParams(n_frames=n_frames, canvas=64, min_objects=2,
                           max_objects=3, spawn_rate=spawn_rate)
    return W.generate(params, seed=seed)


# ---------------------------------------------------------------------------
# target construction


def test_frame_targets_split():
    s = tiny_scenario(3, n_frames=6, spawn_rate=1.0)
    born_later = [o for o in s.objects if o.birth > 0]
    assert born_later
    f0 = frame_targets(s, 0, [])
    assert not f0.existing
    assert {t.ident for t in f0.newborn} == {o.ident for o in s.objects if o.birth == 0}
    late = born_later[0]
    fb = frame_targets(s, late.birth, [o.ident for o in s.objects if o.birth == 0])
    assert late.ident in {t.ident for t in fb.newborn}
    assert {t.ident for t in fb.existing} == {o.ident for o in s.objects if o.birth == 0}
    # referent flags copied from the scenario
    for t in f0.newborn:
        assert t.referent == (t.ident in s.referents[0])


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_descends_quadratic():
    p = T.parameter(np.array([3.0, -2.0]))
    opt = AdamW({"p": p}, lr=0.05, weight_decay=0.0)
    for _ in range(400):
        with T.fresh_tape():
            loss = T.tsum(p * p)
            T.backward(loss)
        opt.step()
        assert p.grad is None  # step consumes gradients
    assert np.abs(p.data).max() < 1e-2


def test_adamw_skips_gradless_params():
    used = T.parameter(np.ones(2))
    unused = T.parameter(np.ones(2))
    opt = AdamW({"a": used, "b": unused}, lr=0.1)
    with T.fresh_tape():
        T.backward(T.tsum(used * used))
    opt.step()
    assert not np.array_equal(used.data, np.ones(2))
    assert np.array_equal(unused.data, np.ones(2))


def test_adamw_state_round_trip():
    r = np.random.default_rng(0)
    p = T.parameter(r.normal(size=(3,)))
    opt = AdamW({"p": p}, lr=0.01)
    for _ in range(3):
        with T.fresh_tape():
            T.backward(T.tsum(p * p))
        opt.step()
    entries = opt.state_entries()
    clone = AdamW({"p": T.parameter(p.data.copy())}, lr=0.5)
    clone.load_state(entries)
    assert clone.step_count == opt.step_count and clone.lr == opt.lr
    assert np.array_equal(clone._m["p"], opt._m["p"])
    assert np.array_equal(clone._v["p"], opt._v["p"])


# ---------------------------------------------------------------------------
# scenario rollout and training


def test_run_scenario_is_finite_and_logged():
    model = tiny_model()
    s = tiny_scenario(1)
    with T.fresh_tape():
        loss, log = run_scenario(model, s, LossWeights())
    assert np.isfinite(loss.data)
    assert len(log) == s.n_frames
    visible0 = sum(o.boxes[0] is not None for o in s.objects)
    assert log[0]["matched"] == visible0
    births = {o.birth for o in s.objects if o.birth > 0}
    for entry in log[1:]:
        want = sum(o.birth == entry["frame"] for o in s.objects)
        assert entry["matched"] == want


def test_training_reduces_loss_and_logs_lr_decay(tmp_path):
    model = tiny_model(2)
    scenarios = [tiny_scenario(2)]
    settings = TrainSettings(epochs=8, lr=3e-4, decay_epoch=6, weight_decay=0.0)
    history, opt = train(model, scenarios, settings)
    assert len(history) == 8
    assert history[-1]["loss"] < history[0]["loss"]
    assert history[5]["lr"] == pytest.approx(3e-4)
    assert history[6]["lr"] == pytest.approx(3e-5)
    assert opt.step_count == 8
    path = tmp_path / "curve.csv"
    write_loss_curve(path, history)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,lr"
    assert len(lines) == 9


def test_resume_gives_bit_identical_losses(tmp_path):
    scenarios = [tiny_scenario(5), tiny_scenario(6)]
    settings = TrainSettings(epochs=2, lr=1e-3)

    model_a = tiny_model(3)
    hist_a, opt_a = train(model_a, scenarios, settings=TrainSettings(epochs=1, lr=1e-3))
    path = tmp_path / "ck.bin"
    model_a.save(path, extras=opt_a.state_entries())
    hist_a2, _ = train(model_a, scenarios, settings, optimizer=opt_a, start_epoch=1)

    model_b = tiny_model(77)
    extras = model_b.load(path)
    opt_b = AdamW(model_b.params(), lr=1e-3)
    opt_b.load_state(extras)
    hist_b, _ = train(model_b, scenarios, settings, optimizer=opt_b, start_epoch=1)
    assert hist_b[0]["loss"] == hist_a2[0]["loss"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_diagnostic():
    model = tiny_model(4)
    model.temporal.offset_ffn.l3.w.data[:] = np.nan
    with pytest.raises(TrainError, match="frame 0"):
        with T.fresh_tape():
            run_scenario(model, tiny_scenario(7), LossWeights())
    model2 = tiny_model(4)
    model2.decoder.cls_head.w.data[:] = np.inf
    with pytest.raises(TrainError, match="frame 0"):
        with T.fresh_tape():
            run_scenario(model2, tiny_scenario(7), LossWeights())


def test_train_requires_scenarios():
    with pytest.raises(TrainError):
        train(tiny_model(), [], TrainSettings(epochs=1))
