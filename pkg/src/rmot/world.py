"""Synthetic tracking world: moving attributed shapes plus referring text.

Scenes are sequences of rectangles (cars) and ellipses (persons) with a
color attribute, moving linearly over a flat canvas with boundary clipping.
Each scenario carries one templated referring expression whose per-frame
referent sets follow from exact predicate semantics:

* ``left`` / ``right``: box center x < 0.5 or not,
* ``same`` / ``opposite``: sign of the object's x velocity (+x is "same"),
* ``ahead``: box center in the upper canvas half (y < 0.5).

Everything is deterministic given a seed. Datasets serialize as JSON lines
with exact float round-trips; frames render on demand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class WorldError(ValueError):
    """Contract violation in scenario data."""


CATEGORIES = ("car", "person")
COLORS = ("red", "blue", "light", "dark")
SIDES = ("left", "right")
DIRECTIONS = ("same", "opposite", "ahead")

VOCABULARY = (
    "the", "car", "person", "red", "blue", "light", "dark",
    "on", "left", "right", "moving", "in", "same", "opposite",
    "direction", "ahead",
)
_WORD_ID = {w: i for i, w in enumerate(VOCABULARY)}

COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "light": (0.88, 0.88, 0.88),
    "dark": (0.12, 0.12, 0.12),
}
BACKGROUND_RGB = (0.45, 0.55, 0.45)

# template -> which optional slots it uses ("dir" excludes "ahead" here;
# "ahead" gets its own positional templates)
TEMPLATES = (
    ("the {cat}", ()),
    ("the {color} {cat}", ("color",)),
    ("the {cat} on the {side}", ("side",)),
    ("the {color} {cat} on the {side}", ("color", "side")),
    ("the {cat} moving in the {dir} direction", ("dir",)),
    ("the {cat} ahead", ("ahead",)),
    ("the {color} {cat} ahead", ("color", "ahead")),
    ("the {color} {cat} moving in the {dir} direction", ("color", "dir")),
)


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.split():
        if word not in _WORD_ID:
            raise WorldError(f"unknown token {word!r}")
        ids.append(_WORD_ID[word])
    if not ids:
        raise WorldError("empty expression")
    return ids


@dataclass
class Expression:
    template: int
    category: str
    color: str | None = None
    side: str | None = None
    direction: str | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise WorldError(f"unknown category {self.category!r}")
        if self.color is not None and self.color not in COLORS:
            raise WorldError(f"unknown color {self.color!r}")
        if self.side is not None and self.side not in SIDES:
            raise WorldError(f"unknown side {self.side!r}")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise WorldError(f"unknown direction {self.direction!r}")

    @property
    def text(self) -> str:
        tmpl = TEMPLATES[self.template][0]
        return tmpl.format(cat=self.category, color=self.color,
                           side=self.side, dir=self.direction)

    def token_ids(self) -> list[int]:
        return tokenize(self.text)


@dataclass
class ObjectTruth:
    ident: int
    category: str
    color: str
    velocity: tuple[float, float]  # normalized units per frame
    birth: int
    boxes: list  # per frame: [cx, cy, w, h] or None before birth

    def visible(self, frame: int) -> bool:
        return self.boxes[frame] is not None


@dataclass
class Scenario:
    seed: int
    n_frames: int
    canvas: int
    expression: Expression
    objects: list[ObjectTruth]
    referents: list[list[int]] = field(default_factory=list)

    def frame_objects(self, frame: int) -> list[ObjectTruth]:
        return [o for o in self.objects if o.visible(frame)]


def matches(expr: Expression, obj: ObjectTruth, frame: int) -> bool:
    """Exact referent predicate for one visible object at one frame."""
    if not obj.visible(frame):
        return False
    if obj.category != expr.category:
        return False
    if expr.color is not None and obj.color != expr.color:
        return False
    cx, cy, _, _ = obj.boxes[frame]
    if expr.side == "left" and not cx < 0.5:
        return False
    if expr.side == "right" and not cx >= 0.5:
        return False
    if expr.direction == "same" and not obj.velocity[0] > 0:
        return False
    if expr.direction == "opposite" and not obj.velocity[0] < 0:
        return False
    if expr.direction == "ahead" and not cy < 0.5:
        return False
    return True


def referent_sets(expr: Expression, objects: list[ObjectTruth], n_frames: int) -> list[list[int]]:
    return [sorted(o.ident for o in objects if matches(expr, o, f)) for f in range(n_frames)]


# ---------------------------------------------------------------------------
# generation


@dataclass
class WorldParams:
    n_frames: int = 20
    canvas: int = 64
    min_objects: int = 2
    max_objects: int = 6
    spawn_rate: float = 0.3  # chance each object past the first is born mid-sequence


def _roll_object(rng: np.random.Generator, ident: int, birth: int, n_frames: int,
                 placed: list[np.ndarray]) -> ObjectTruth:
    w = rng.uniform(0.12, 0.28)
    h = rng.uniform(0.12, 0.28)
    for _ in range(40):
        cx = rng.uniform(w / 2 + 0.02, 1 - w / 2 - 0.02)
        cy = rng.uniform(h / 2 + 0.02, 1 - h / 2 - 0.02)
        if all(abs(cx - p[0]) > (w + p[2]) / 2 or abs(cy - p[1]) > (h + p[3]) / 2 for p in placed):
            break
    vx = rng.uniform(0.004, 0.02) * rng.choice([-1.0, 1.0])
    vy = rng.uniform(0.0, 0.012) * rng.choice([-1.0, 1.0])
    boxes: list = [None] * n_frames
    x, y = cx, cy
    for f in range(birth, n_frames):
        boxes[f] = [float(np.clip(x, w / 2, 1 - w / 2)), float(np.clip(y, h / 2, 1 - h / 2)),
                    float(w), float(h)]
        x += vx
        y += vy
    return ObjectTruth(
        ident=ident,
        category=str(rng.choice(CATEGORIES)),
        color=str(rng.choice(COLORS)),
        velocity=(float(vx), float(vy)),
        birth=birth,
        boxes=boxes,
    )


def _roll_expression(rng: np.random.Generator) -> Expression:
    t = int(rng.integers(0, len(TEMPLATES)))
    slots = TEMPLATES[t][1]
    return Expression(
        template=t,
        category=str(rng.choice(CATEGORIES)),
        color=str(rng.choice(COLORS)) if "color" in slots else None,
        side=str(rng.choice(SIDES)) if "side" in slots else None,
        direction=("ahead" if "ahead" in slots
                   else str(rng.choice(("same", "opposite"))) if "dir" in slots else None),
    )


def generate(params: WorldParams, seed: int) -> Scenario:
    """One deterministic scenario; prefers expressions with nonempty support."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(params.min_objects, params.max_objects + 1))
    last = params.n_frames - 1
    births = [0]
    for _ in range(count - 1):
        mid = params.spawn_rate > 0 and rng.random() < params.spawn_rate
        births.append(min(int(rng.integers(2, max(3, params.n_frames - 3))), last) if mid else 0)
    if params.spawn_rate > 0 and count >= 2 and all(b == 0 for b in births):
        births[-1] = min(max(2, params.n_frames // 3), last)

    objects = []
    placed: list[np.ndarray] = []
    for ident, birth in enumerate(births):
        obj = _roll_object(rng, ident, birth, params.n_frames, placed)
        first = obj.boxes[birth]
        placed.append(np.array(first))
        objects.append(obj)

    expr = None
    for _ in range(30):
        expr = _roll_expression(rng)
        if any(referent_sets(expr, objects, params.n_frames)):
            break
    refs = referent_sets(expr, objects, params.n_frames)
    return Scenario(seed=seed, n_frames=params.n_frames, canvas=params.canvas,
                    expression=expr, objects=objects, referents=refs)


def generate_dataset(params: WorldParams, seed: int, count: int) -> list[Scenario]:
    root = np.random.default_rng(seed)
    seeds = root.integers(0, 2**31 - 1, size=count)
    return [generate(params, int(s)) for s in seeds]


# ---------------------------------------------------------------------------
# serialization (JSON lines, exact float round-trip via repr)


def scenario_to_dict(s: Scenario) -> dict:
    e = s.expression
    return {
        "seed": s.seed,
        "n_frames": s.n_frames,
        "canvas": s.canvas,
        "expression": {"template": e.template, "category": e.category,
                       "color": e.color, "side": e.side, "direction": e.direction,
                       "text": e.text},
        "objects": [{"ident": o.ident, "category": o.category, "color": o.color,
                     "velocity": list(o.velocity), "birth": o.birth, "boxes": o.boxes}
                    for o in s.objects],
        "referents": s.referents,
    }


def scenario_from_dict(d: dict) -> Scenario:
    ed = d["expression"]
    expr = Expression(template=ed["template"], category=ed["category"],
                      color=ed["color"], side=ed["side"], direction=ed["direction"])
    if expr.text != ed["text"]:
        raise WorldError("expression text does not match its slots")
    objects = []
    for od in d["objects"]:
        boxes = [None if b is None else [float(v) for v in b] for b in od["boxes"]]
        for f, b in enumerate(boxes):
            if b is None:
                if f >= od["birth"]:
                    raise WorldError("hole in visibility after birth")
                continue
            if f < od["birth"]:
                raise WorldError("box before birth frame")
            if len(b) != 4 or not all(0.0 <= v <= 1.0 for v in b):
                raise WorldError(f"box outside [0,1]: {b}")
        objects.append(ObjectTruth(ident=od["ident"], category=od["category"],
                                   color=od["color"], velocity=tuple(od["velocity"]),
                                   birth=od["birth"], boxes=boxes))
    return Scenario(seed=d["seed"], n_frames=d["n_frames"], canvas=d["canvas"],
                    expression=expr, objects=objects, referents=d["referents"])


def save_dataset(path, scenarios: list[Scenario]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_dict(s), separators=(",", ":")) + "\n")


def load_dataset(path) -> list[Scenario]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(scenario_from_dict(json.loads(line)))
    if not out:
        raise WorldError(f"{path} holds no scenarios")
    return out


# ---------------------------------------------------------------------------
# rendering


def render(scenario: Scenario, frame: int) -> np.ndarray:
    """Rasterize one frame to [H, W, 3] floats in [0,1]; draw order is id order."""
    n = scenario.canvas
    img = np.empty((n, n, 3))
    img[:] = BACKGROUND_RGB
    centers = (np.arange(n) + 0.5) / n
    gy, gx = np.meshgrid(centers, centers, indexing="ij")
    for obj in scenario.objects:
        if not obj.visible(frame):
            continue
        cx, cy, w, h = obj.boxes[frame]
        if obj.category == "car":
            mask = (np.abs(gx - cx) <= w / 2) & (np.abs(gy - cy) <= h / 2)
        else:
            mask = ((gx - cx) / (w / 2)) ** 2 + ((gy - cy) / (h / 2)) ** 2 <= 1.0
        img[mask] = COLOR_RGB[obj.color]
    return img


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    raw = (np.clip(img, 0, 1) * 255.0).round().astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(img))


# 3x5 bitmap glyphs for overlay labels
_GLYPHS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001001001001", "8": "111101111101111",
    "9": "111101111001111", ".": "000000000000010", "/": "001001010100100",
    " ": "000000000000000", ":": "000010000010000",
}


def _draw_text(img: np.ndarray, row: int, col: int, text: str, rgb) -> None:
    h, w, _ = img.shape
    for ch in text:
        glyph = _GLYPHS.get(ch)
        if glyph is None:
            continue
        for k, bit in enumerate(glyph):
            if bit == "1":
                r, c = row + k // 3, col + k % 3
                if 0 <= r < h and 0 <= c < w:
                    img[r, c] = rgb
        col += 4


def overlay(img: np.ndarray, boxes: list[tuple[int, np.ndarray, float, float]],
            scale: int = 4) -> np.ndarray:
    """Upscale a frame and draw (ident, box, obj_score, ref_score) annotations."""
    big = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    h, w, _ = big.shape
    for ident, box, obj_score, ref_score in boxes:
        cx, cy, bw, bh = box
        x1 = int(np.clip((cx - bw / 2) * w, 0, w - 1))
        x2 = int(np.clip((cx + bw / 2) * w, 0, w - 1))
        y1 = int(np.clip((cy - bh / 2) * h, 0, h - 1))
        y2 = int(np.clip((cy + bh / 2) * h, 0, h - 1))
        rgb = (1.0, 0.9, 0.1)
        big[y1, x1:x2 + 1] = rgb
        big[y2, x1:x2 + 1] = rgb
        big[y1:y2 + 1, x1] = rgb
        big[y1:y2 + 1, x2] = rgb
        _draw_text(big, max(0, y1 - 7), x1, f"{ident}", rgb)
        _draw_text(big, min(h - 6, y2 + 2), x1, f"{ref_score:.2f}/{obj_score:.2f}", rgb)
    return big
