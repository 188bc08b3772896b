"""Annotation files, the synthetic referring-scene generator, and tokenization.

Annotation schema (JSON, one canonical form):

    {
      "schema_version": 1,
      "records": [
        {
          "image_id": "scene-00000",
          "image_w": 64, "image_h": 64,
          "expression": "the red square",
          "target_boxes": [[x, y, w, h]],        # pixel top-left form
          "category": "square"                    # optional
        },
        ...
      ]
    }

The generator rasterizes colored shapes (squares, circles, triangles) at
several size classes onto a flat background and emits a templated referring
expression that uniquely identifies one of them; uniqueness is established
by exhaustively evaluating the expression's predicate against every placed
object. Everything is deterministic given an :class:`RngState`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mogref.rng import RngState

SCHEMA_VERSION = 1

PAD_WORD = "<pad>"
UNK_WORD = "<unk>"


class ValidationError(ValueError):
    """An input file or record violates the documented schema."""


class GenerationError(RuntimeError):
    """The scene generator could not satisfy its constraints."""


# ---------------------------------------------------------------------------
# annotation records
# ---------------------------------------------------------------------------


@dataclass
class AnnotationRecord:
    image_id: str
    image_w: int
    image_h: int
    expression: str
    target_boxes: list[tuple[float, float, float, float]]  # pixel (x, y, w, h)
    category: str | None = None

    def validate(self, where: str = "") -> None:
        tag = where or self.image_id
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValidationError(f"{tag}: image_w/image_h must be positive")
        if not self.expression:
            raise ValidationError(f"{tag}: expression is empty")
        if not self.target_boxes:
            raise ValidationError(f"{tag}: target_boxes is empty")
        for i, (x, y, w, h) in enumerate(self.target_boxes):
            if w < 0 or h < 0:
                raise ValidationError(f"{tag}: target_boxes[{i}] has negative width/height")
            if x < 0 or y < 0 or x + w > self.image_w or y + h > self.image_h:
                raise ValidationError(
                    f"{tag}: target_boxes[{i}] exceeds image bounds "
                    f"({x}, {y}, {w}, {h}) vs {self.image_w}x{self.image_h}"
                )

    def to_json(self) -> dict:
        out = {
            "image_id": self.image_id,
            "image_w": self.image_w,
            "image_h": self.image_h,
            "expression": self.expression,
            "target_boxes": [list(b) for b in self.target_boxes],
        }
        if self.category is not None:
            out["category"] = self.category
        return out


def _record_from_json(obj: dict, index: int) -> AnnotationRecord:
    where = f"records[{index}]"
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: expected an object")
    for key in ("image_id", "image_w", "image_h", "expression", "target_boxes"):
        if key not in obj:
            raise ValidationError(f"{where}: missing field {key!r}")
    boxes = obj["target_boxes"]
    if not isinstance(boxes, list):
        raise ValidationError(f"{where}: target_boxes must be a list")
    parsed = []
    for i, b in enumerate(boxes):
        if not (isinstance(b, list) and len(b) == 4):
            raise ValidationError(f"{where}: target_boxes[{i}] must be [x, y, w, h]")
        parsed.append(tuple(float(v) for v in b))
    rec = AnnotationRecord(
        image_id=str(obj["image_id"]),
        image_w=int(obj["image_w"]),
        image_h=int(obj["image_h"]),
        expression=str(obj["expression"]),
        target_boxes=parsed,
        category=obj.get("category"),
    )
    rec.validate(where)
    return rec


def load_annotations(path) -> list[AnnotationRecord]:
    """Read and validate an annotation file; errors name record and field."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "records" not in doc:
        raise ValidationError(f"{path}: expected an object with a 'records' field")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"{path}: schema_version {doc.get('schema_version')!r} != {SCHEMA_VERSION}"
        )
    return [_record_from_json(obj, i) for i, obj in enumerate(doc["records"])]


def save_annotations(path, records: Sequence[AnnotationRecord]) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "records": [r.to_json() for r in records]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# vocabulary and tokenization
# ---------------------------------------------------------------------------

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
}
SHAPES = ("square", "circle", "triangle")
SIZE_CLASSES = ("small", "medium", "large")

# side length as a fraction of the scene edge, per size class; box areas
# span roughly 1% to 25% of the scene
_SIZE_RANGES = {
    "small": (0.09, 0.16),
    "medium": (0.22, 0.28),
    "large": (0.38, 0.47),
}

_REGION_NAMES = (
    ("top left", "top center", "top right"),
    ("middle left", "center", "middle right"),
    ("bottom left", "bottom center", "bottom right"),
)

_LEXICON = (
    "the", "in", "of", "image", "nearest", "to",
    "top", "bottom", "middle", "left", "right", "center",
    *COLORS.keys(), *SHAPES, *SIZE_CLASSES,
)


class Vocab:
    """Closed word list; id 0 is padding, id 1 catches unknown words."""

    def __init__(self, words: Sequence[str]):
        self.words = (PAD_WORD, UNK_WORD, *words)
        self._ids = {w: i for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def id_of(self, word: str) -> int:
        return self._ids.get(word, self.unk_id)

    def word_of(self, idx: int) -> str:
        return self.words[idx]

    def content_words(self) -> list[str]:
        return list(self.words[2:])


def default_vocab() -> Vocab:
    return Vocab(_LEXICON)


def normalize_words(expression: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    cleaned = "".join(c if (c.isalnum() or c.isspace()) else " " for c in expression.lower())
    return cleaned.split()


def tokenize(expression: str, vocab: Vocab) -> list[int]:
    """Map words to ids; unknown words become the UNK id, never an error."""
    return [vocab.id_of(w) for w in normalize_words(expression)]


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Controls one generated referring scene."""

    image_size: int = 64
    num_distractors: int = 3
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS.keys())
    size_classes: tuple[str, ...] = SIZE_CLASSES
    templates: tuple[str, ...] = ("attribute", "position", "relation")
    max_retries: int = 25

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.num_distractors < 0:
            raise ValueError("num_distractors must be non-negative")
        for s in self.size_classes:
            if s not in _SIZE_RANGES:
                raise ValueError(f"unknown size class {s!r}")
        for t in self.templates:
            if t not in ("attribute", "position", "relation"):
                raise ValueError(f"unknown template {t!r}")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size_class: str
    x: int  # top-left, pixels
    y: int
    side: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (float(self.x), float(self.y), float(self.side), float(self.side))

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.side / 2.0, self.y + self.side / 2.0)


@dataclass
class Scene:
    image: np.ndarray  # (S, S, 3) float64 in [0, 1]
    objects: list[SceneObject]
    target_index: int
    expression: str
    record: AnnotationRecord


def region_of(obj: SceneObject, image_size: int) -> str:
    """Name of the 3x3 grid cell containing the object's center."""
    cx, cy = obj.center
    col = min(2, int(3.0 * cx / image_size))
    row = min(2, int(3.0 * cy / image_size))
    return _REGION_NAMES[row][col]


def expression_matches(expression: str, obj_index: int, objects: Sequence[SceneObject],
                       image_size: int) -> bool:
    """Does the templated expression pick out ``objects[obj_index]``?

    Understands the three template families emitted by the generator. The
    relation form requires a unique anchor; if the anchor is ambiguous the
    expression matches nothing.
    """
    words = normalize_words(expression)
    obj = objects[obj_index]
    if "nearest" in words:
        # the <color> <shape> nearest to the <color2> <shape2>
        color, shape, anchor_color, anchor_shape = words[1], words[2], words[6], words[7]
        anchors = [o for o in objects if o.color == anchor_color and o.shape == anchor_shape]
        if len(anchors) != 1:
            return False
        anchor = anchors[0]
        group = [o for o in objects if o.color == color and o.shape == shape and o is not anchor]
        if not group:
            return False

        def dist(o: SceneObject) -> float:
            ax, ay = anchor.center
            ox, oy = o.center
            return (ax - ox) ** 2 + (ay - oy) ** 2

        best = min(dist(o) for o in group)
        nearest = [o for o in group if dist(o) == best]
        if len(nearest) != 1:  # equidistant candidates: ambiguous, matches nothing
            return False
        return obj is nearest[0] and obj.color == color and obj.shape == shape
    if "in" in words:
        # the <color> <shape> in the <region...> of the image
        color, shape = words[1], words[2]
        region = " ".join(words[5:-3]) if words[-1] == "image" else ""
        return (
            obj.color == color
            and obj.shape == shape
            and region_of(obj, image_size) == region
        )
    # the <color> <shape>
    color, shape = words[1], words[2]
    return obj.color == color and obj.shape == shape


def _matches_uniquely(expression: str, target: int, objects: Sequence[SceneObject],
                      image_size: int) -> bool:
    hits = [i for i in range(len(objects))
            if expression_matches(expression, i, objects, image_size)]
    return hits == [target]


def _place_objects(spec: SyntheticSceneSpec, rng: RngState) -> list[SceneObject] | None:
    size = spec.image_size
    count = 1 + spec.num_distractors
    placed: list[SceneObject] = []
    for _ in range(count):
        ok = False
        for _attempt in range(60):
            size_class = rng.choice(spec.size_classes)
            lo, hi = _SIZE_RANGES[size_class]
            side = max(3, int(round(rng.uniform_in(lo, hi) * size)))
            if side + 2 >= size:
                continue
            x = rng.randint(size - side - 1) + 1
            y = rng.randint(size - side - 1) + 1
            clear = all(
                x + side + 1 <= o.x or o.x + o.side + 1 <= x
                or y + side + 1 <= o.y or o.y + o.side + 1 <= y
                for o in placed
            )
            if clear:
                placed.append(SceneObject(
                    shape=rng.choice(spec.shapes),
                    color=rng.choice(spec.colors),
                    size_class=size_class,
                    x=x, y=y, side=side,
                ))
                ok = True
                break
        if not ok:
            return None
    return placed


def _candidate_expression(template: str, target: SceneObject,
                          objects: Sequence[SceneObject], image_size: int,
                          rng: RngState) -> str | None:
    if template == "attribute":
        return f"the {target.color} {target.shape}"
    if template == "position":
        return (f"the {target.color} {target.shape} in the "
                f"{region_of(target, image_size)} of the image")
    # relation: pick a unique-looking anchor of a different color/shape combo
    anchors = [o for o in objects
               if o is not target and (o.color, o.shape) != (target.color, target.shape)]
    if not anchors:
        return None
    anchor = rng.choice(anchors)
    return (f"the {target.color} {target.shape} nearest to the "
            f"{anchor.color} {anchor.shape}")


def _rasterize(objects: Sequence[SceneObject], size: int) -> np.ndarray:
    image = np.full((size, size, 3), 0.12, dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    for obj in objects:
        rgb = COLORS[obj.color]
        x0, y0, s = obj.x, obj.y, obj.side
        if obj.shape == "square":
            sel = (xx >= x0) & (xx < x0 + s) & (yy >= y0) & (yy < y0 + s)
        elif obj.shape == "circle":
            cx, cy = x0 + (s - 1) / 2.0, y0 + (s - 1) / 2.0
            r = s / 2.0
            sel = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:  # upward triangle filling the box
            fy = (yy - y0) / max(1, s - 1)
            cx = x0 + (s - 1) / 2.0
            half = fy * (s / 2.0)
            sel = (yy >= y0) & (yy < y0 + s) & (np.abs(xx - cx) <= half)
        image[sel] = rgb
    return image


def generate_scene(spec: SyntheticSceneSpec, rng: RngState,
                   image_id: str = "scene") -> tuple[np.ndarray, AnnotationRecord]:
    """Render one scene and its referring annotation; deterministic per rng."""
    scene = generate_scene_full(spec, rng, image_id=image_id)
    return scene.image, scene.record


def generate_scene_full(spec: SyntheticSceneSpec, rng: RngState,
                        image_id: str = "scene") -> Scene:
    """Like :func:`generate_scene` but keeps the placed objects for oracles."""
    for _ in range(spec.max_retries):
        objects = _place_objects(spec, rng)
        if objects is None:
            continue
        order = list(range(len(objects)))
        rng.shuffle(order)
        templates = list(spec.templates)
        rng.shuffle(templates)
        for target_idx in order:
            target = objects[target_idx]
            for template in templates:
                expr = _candidate_expression(template, target, objects,
                                             spec.image_size, rng)
                if expr is None:
                    continue
                if _matches_uniquely(expr, target_idx, objects, spec.image_size):
                    image = _rasterize(objects, spec.image_size)
                    record = AnnotationRecord(
                        image_id=image_id,
                        image_w=spec.image_size,
                        image_h=spec.image_size,
                        expression=expr,
                        target_boxes=[target.box],
                        category=target.shape,
                    )
                    record.validate()
                    return Scene(image, objects, target_idx, expr, record)
    raise GenerationError(
        f"could not build a uniquely-referring scene in {spec.max_retries} attempts"
    )


# ---------------------------------------------------------------------------
# PPM raster I/O (inspection-format, no codec dependency)
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 PPM, 8-bit, from a float image in [0, 1]."""
    h, w, c = image.shape
    if c != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM back into a float image in [0, 1].

    The header is scanned token by token (comments allowed) and exactly one
    whitespace byte is consumed after maxval, so pixel data that happens to
    start with whitespace-valued bytes is preserved.
    """
    raw = Path(path).read_bytes()
    whitespace = b" \t\n\r\x0b\x0c"
    idx = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        while idx < len(raw) and raw[idx] in whitespace:
            idx += 1
        if idx < len(raw) and raw[idx : idx + 1] == b"#":  # comment to end of line
            while idx < len(raw) and raw[idx] not in b"\n":
                idx += 1
            continue
        start = idx
        while idx < len(raw) and raw[idx] not in whitespace:
            idx += 1
        if start == idx:
            raise ValidationError(f"{path}: truncated PPM header")
        tokens.append(raw[start:idx])
    if tokens[0] != b"P6":
        raise ValidationError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ValidationError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 is supported")
    idx += 1  # the single whitespace byte separating header and pixels
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=idx, count=-1)
    if pixels.size < w * h * 3:
        raise ValidationError(f"{path}: truncated pixel data")
    return pixels[: w * h * 3].reshape(h, w, 3).astype(np.float64) / 255.0
