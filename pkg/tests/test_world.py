import json

import numpy as np
import pytest

from rmot import world as W


def small_params(**kw):
    base = dict(n_frames=12, canvas=64, min_objects=2, max_objects=4, spawn_rate=0.4)
    base.update(kw)
    return W.WorldParams(**base)


# ---------------------------------------------------------------------------
# generation


def test_generation_is_deterministic():
    a = W.generate(small_params(), seed=7)
    b = W.generate(small_params(), seed=7)
    assert W.scenario_to_dict(a) == W.scenario_to_dict(b)
    c = W.generate(small_params(), seed=8)
    assert W.scenario_to_dict(a) != W.scenario_to_dict(c)


def test_boxes_stay_inside_canvas_while_visible():
    for seed in range(20):
        s = W.generate(small_params(), seed=seed)
        for obj in s.objects:
            assert obj.boxes[obj.birth - 1] is None if obj.birth else True
            for f in range(s.n_frames):
                box = obj.boxes[f]
                if f < obj.birth:
                    assert box is None
                else:
                    cx, cy, w, h = box
                    assert 0 <= cx - w / 2 and cx + w / 2 <= 1
                    assert 0 <= cy - h / 2 and cy + h / 2 <= 1


def test_spawn_rate_controls_newborns():
    allzero = W.generate(small_params(spawn_rate=0.0), seed=3)
    assert all(o.birth == 0 for o in allzero.objects)
    with_spawns = W.generate(small_params(spawn_rate=1.0), seed=3)
    assert any(o.birth > 0 for o in with_spawns.objects)
    # spawn_rate > 0 forces a mid-sequence newborn even on unlucky draws
    for seed in range(15):
        s = W.generate(small_params(spawn_rate=0.05), seed=seed)
        assert any(o.birth > 0 for o in s.objects)


def test_referents_match_independent_reevaluation():
    for seed in range(15):
        s = W.generate(small_params(), seed=seed)
        e = s.expression
        for f in range(s.n_frames):
            expected = []
            for o in s.objects:
                if o.boxes[f] is None or o.category != e.category:
                    continue
                if e.color is not None and o.color != e.color:
                    continue
                cx, cy = o.boxes[f][0], o.boxes[f][1]
                if e.side == "left" and cx >= 0.5:
                    continue
                if e.side == "right" and cx < 0.5:
                    continue
                if e.direction == "same" and o.velocity[0] <= 0:
                    continue
                if e.direction == "opposite" and o.velocity[0] >= 0:
                    continue
                if e.direction == "ahead" and cy >= 0.5:
                    continue
                expected.append(o.ident)
            assert s.referents[f] == sorted(expected)


def test_referent_set_changes_as_object_crosses_midline():
    obj = W.ObjectTruth(
        ident=0, category="car", color="red", velocity=(0.1, 0.0), birth=0,
        boxes=[[0.3 + 0.1 * f, 0.5, 0.2, 0.2] for f in range(5)],
    )
    expr = W.Expression(template=2, category="car", side="left")
    refs = W.referent_sets(expr, [obj], 5)
    assert refs == [[0], [0], [], [], []]


# ---------------------------------------------------------------------------
# language


def test_expression_text_and_tokens():
    e = W.Expression(template=7, category="person", color="dark", direction="opposite")
    assert e.text == "the dark person moving in the opposite direction"
    ids = e.token_ids()
    assert len(ids) == 8
    assert all(0 <= i < len(W.VOCABULARY) for i in ids)


def test_every_template_tokenizes():
    for t, (_, slots) in enumerate(W.TEMPLATES):
        e = W.Expression(
            template=t, category="car",
            color="blue" if "color" in slots else None,
            side="left" if "side" in slots else None,
            direction="ahead" if "ahead" in slots else ("same" if "dir" in slots else None),
        )
        assert e.token_ids()


def test_tokenize_rejects_unknown_words():
    with pytest.raises(W.WorldError):
        W.tokenize("the purple car")
    with pytest.raises(W.WorldError):
        W.tokenize("")


def test_expression_rejects_unknown_attributes():
    with pytest.raises(W.WorldError):
        W.Expression(template=1, category="bike")
    with pytest.raises(W.WorldError):
        W.Expression(template=1, category="car", color="purple")


# ---------------------------------------------------------------------------
# serialization


def test_dataset_round_trip_is_exact(tmp_path):
    scenarios = W.generate_dataset(small_params(), seed=11, count=8)
    path = tmp_path / "data.jsonl"
    W.save_dataset(path, scenarios)
    loaded = W.load_dataset(path)
    assert [W.scenario_to_dict(s) for s in loaded] == [W.scenario_to_dict(s) for s in scenarios]
    path2 = tmp_path / "again.jsonl"
    W.save_dataset(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_loader_rejects_corrupt_scenarios(tmp_path):
    s = W.generate(small_params(), seed=1)
    d = W.scenario_to_dict(s)
    d["objects"][0]["boxes"][-1] = [2.0, 0.5, 0.1, 0.1]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(W.WorldError):
        W.load_dataset(path)
    d2 = W.scenario_to_dict(s)
    d2["expression"]["text"] = "the car ahead"
    if d2["expression"]["text"] == W.Expression(**{k: v for k, v in d2["expression"].items() if k != "text"}).text:
        d2["expression"]["text"] = "the blue car"
    path.write_text(json.dumps(d2) + "\n")
    with pytest.raises(W.WorldError):
        W.load_dataset(path)


# ---------------------------------------------------------------------------
# rendering


def test_center_pixel_carries_object_color():
    obj = W.ObjectTruth(ident=0, category="car", color="blue", velocity=(0.01, 0),
                        birth=0, boxes=[[0.3, 0.4, 0.2, 0.2]])
    other = W.ObjectTruth(ident=1, category="person", color="red", velocity=(0.01, 0),
                          birth=0, boxes=[[0.75, 0.7, 0.2, 0.2]])
    s = W.Scenario(seed=0, n_frames=1, canvas=64,
                   expression=W.Expression(template=0, category="car"),
                   objects=[obj, other], referents=[[0]])
    img = W.render(s, 0)
    assert img.shape == (64, 64, 3)
    r, c = int(0.4 * 64), int(0.3 * 64)
    assert tuple(img[r, c]) == W.COLOR_RGB["blue"]
    r2, c2 = int(0.7 * 64), int(0.75 * 64)
    assert tuple(img[r2, c2]) == W.COLOR_RGB["red"]
    # background untouched far from both
    assert tuple(img[2, 2]) == W.BACKGROUND_RGB


def test_person_ellipse_misses_box_corner():
    box = [0.5, 0.5, 0.4, 0.4]
    person = W.ObjectTruth(0, "person", "dark", (0.01, 0), 0, [box])
    car = W.ObjectTruth(0, "car", "dark", (0.01, 0), 0, [box])
    e = W.Expression(template=0, category="car")
    img_p = W.render(W.Scenario(0, 1, 64, e, [person], [[]]), 0)
    img_c = W.render(W.Scenario(0, 1, 64, e, [car], [[0]]), 0)
    corner = (int((0.5 - 0.19) * 64), int((0.5 - 0.19) * 64))
    assert tuple(img_c[corner]) == W.COLOR_RGB["dark"]
    assert tuple(img_p[corner]) == W.BACKGROUND_RGB


def test_ppm_bytes_format():
    img = np.zeros((4, 6, 3))
    img[0, 0] = (1.0, 0.5, 0.0)
    raw = W.ppm_bytes(img)
    assert raw.startswith(b"P6\n6 4\n255\n")
    assert len(raw) == len(b"P6\n6 4\n255\n") + 4 * 6 * 3
    assert raw[-4 * 6 * 3] == 255  # first channel of pixel (0,0)


def test_overlay_draws_in_bounds():
    s = W.generate(small_params(), seed=5)
    img = W.render(s, 0)
    boxed = W.overlay(img, [(3, np.array([0.5, 0.5, 0.3, 0.3]), 0.91, 0.37)])
    assert boxed.shape == (256, 256, 3)
    assert boxed.max() <= 1.0 and boxed.min() >= 0.0
    assert not np.array_equal(boxed, np.repeat(np.repeat(img, 4, 0), 4, 1))
