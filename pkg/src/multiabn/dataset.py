"""Procedural multi-view scenes with fetching instructions.

Scenes are flat-shaded 2D renderings: furniture pieces stand on the
floor, small objects stand on furniture surfaces. Views 2..M are
horizontal camera shifts with optional mirroring, so left/right
relations are view-dependent while distances are not. Instructions are
filled from a template grammar and accepted only when an independent
parser-based checker finds exactly one matching object in every view.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .vocab import Vocabulary

SHAPES = ("ball", "box", "bottle", "doll")
COLORS = {
    "red": (200, 45, 45),
    "green": (60, 170, 70),
    "blue": (60, 90, 200),
    "yellow": (225, 200, 60),
    "purple": (150, 70, 170),
}
SIZES = ("small", "big")
FURNITURE = ("shelf", "table", "sofa")
VERBS = (("bring", "me"), ("give", "me"), ("get", "me"), ("fetch",), ("grab",), ("pick", "up"))

BACKGROUND = (235, 235, 235)
FURNITURE_COLORS = {
    "shelf": (139, 94, 60),
    "shelf_inner": (222, 205, 185),
    "table": (160, 120, 75),
    "sofa": (105, 105, 115),
}


class GenerationError(Exception):
    """Raised when a scene cannot be placed within the retry budget."""


class AnnotationError(Exception):
    """Raised when no unambiguous description of the target exists."""


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    frame: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union else 0.0


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    region: int                   # index into Scene.sources
    boxes: list[BoundingBox]      # one per view

    def box(self, view: int) -> BoundingBox:
        return self.boxes[view - 1]


@dataclass
class SourceRegion:
    kind: str                     # shelf | table | sofa
    part: str | None              # upper | lower for shelves
    boxes: list[BoundingBox]

    def box(self, view: int) -> BoundingBox:
        return self.boxes[view - 1]

    @property
    def phrase(self) -> str:
        if self.part:
            return f"the {self.part} part of the {self.kind}"
        return f"the {self.kind}"


@dataclass
class Scene:
    scene_id: int
    images: list                  # H×W×3 uint8 per view
    objects: list
    sources: list
    target_id: int
    source_id: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.target_id == other.target_id
            and self.source_id == other.source_id
            and self.objects == other.objects
            and self.sources == other.sources
            and len(self.images) == len(other.images)
            and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
        )


@dataclass
class Annotation:
    scene_id: int
    sentences: list
    token_ids: list = field(default_factory=list)


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    views: int = 3
    refs_per_target: int = 2
    val_fraction: float = 0.1
    mirror_prob: float = 0.5
    max_shift_frac: float = 0.125
    object_counts: tuple = (2, 3, 4, 5)
    count_probs: tuple = (0.15, 0.45, 0.25, 0.15)

    def __post_init__(self):
        if self.views < 1:
            raise ValueError("views must be >= 1")
        if len(self.object_counts) != len(self.count_probs):
            raise ValueError("object_counts and count_probs must align")
        if abs(sum(self.count_probs) - 1.0) > 1e-9:
            raise ValueError("count_probs must sum to 1")

    @property
    def max_shift(self) -> int:
        return max(1, round(self.max_shift_frac * self.image_size))

    def unit(self, frac: float) -> int:
        return max(1, round(frac * self.image_size))


# ---------------------------------------------------------------------------
# rendering primitives
# ---------------------------------------------------------------------------

def _fill_rect(canvas, x, y, w, h, color):
    canvas[y:y + h, x:x + w] = color


def _fill_circle(canvas, cx, cy, r, color):
    yy, xx = np.ogrid[:canvas.shape[0], :canvas.shape[1]]
    canvas[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = color


def _draw_object(canvas, shape, x, y, w, h, color):
    if shape == "ball":
        _fill_circle(canvas, x + w // 2, y + h // 2, (w - 1) // 2, color)
    elif shape == "box":
        _fill_rect(canvas, x, y, w, h, color)
    elif shape == "bottle":
        neck_h = max(1, int(h * 0.35))
        neck_w = max(1, w // 3)
        _fill_rect(canvas, x + (w - neck_w) // 2, y, neck_w, neck_h, color)
        _fill_rect(canvas, x, y + neck_h, w, h - neck_h, color)
    elif shape == "doll":
        head_r = max(1, h // 5)
        _fill_circle(canvas, x + w // 2, y + head_r, head_r, color)
        _fill_rect(canvas, x + max(0, (w - 2 * head_r) // 2 - 1), y + 2 * head_r,
                   min(w, 2 * head_r + 2), h - 2 * head_r, color)
    else:
        raise ValueError(f"unknown shape {shape}")
    # anchor pixels so the drawn extent always spans the full box
    canvas[y + h - 1, x] = color
    canvas[y + h - 1, x + w - 1] = color


_OBJECT_DIMS = {
    # (w_frac, h_frac) per size class
    "ball": {"small": (0.11, 0.11), "big": (0.17, 0.17)},
    "box": {"small": (0.11, 0.10), "big": (0.16, 0.15)},
    "bottle": {"small": (0.08, 0.16), "big": (0.11, 0.22)},
    "doll": {"small": (0.10, 0.17), "big": (0.13, 0.23)},
}


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _world_furniture(rng, config: GenConfig):
    """Place 1-2 distinct furniture pieces; returns (pieces, regions).

    Pieces are draw instructions in world coordinates; regions are the
    surfaces objects can stand on, also in world coordinates.
    """
    u = config.unit
    size = config.image_size
    lo = config.max_shift              # usable world span is [lo, size]
    floor = size - u(0.05)

    kinds = list(FURNITURE)
    rng.shuffle(kinds)
    n_pieces = 1 if rng.random() < 0.3 else 2
    kinds = kinds[:n_pieces]

    widths = {"shelf": u(0.38), "table": u(0.40), "sofa": u(0.40)}
    total = sum(widths[k] for k in kinds)
    gap = max(1, (size - lo - total) // (n_pieces + 1))
    x = lo + gap

    pieces = []
    regions = []
    for kind in kinds:
        w = widths[kind]
        if kind == "shelf":
            h = u(0.58)
            top = floor - h
            t = max(2, u(0.035))       # frame thickness
            mid = top + h // 2
            pieces.append(("shelf", x, top, w, h, t, mid))
            inner_w = w - 2 * t
            upper_h = mid - (top + t)
            lower_h = floor - t - (mid + t)
            regions.append(SourceRegion("shelf", "upper", _region_boxes(x + t, top + t, inner_w, upper_h)))
            regions.append(SourceRegion("shelf", "lower", _region_boxes(x + t, mid + t, inner_w, lower_h)))
        elif kind == "table":
            slab = max(2, u(0.045))
            top_y = floor - u(0.30)
            pieces.append(("table", x, top_y, w, floor - top_y, slab, 0))
            space = u(0.26)
            regions.append(SourceRegion("table", None, _region_boxes(x + 1, top_y - space, w - 2, space)))
        else:
            seat_y = floor - u(0.16)
            pieces.append(("sofa", x, seat_y, w, floor - seat_y, 0, 0))
            space = u(0.26)
            regions.append(SourceRegion("sofa", None, _region_boxes(x + u(0.05), seat_y - space,
                                                                    w - 2 * u(0.05), space)))
        x += w + gap
    return pieces, regions


def _region_boxes(x, y, w, h):
    # placeholder single box in world coordinates; reprojected per view later
    return [BoundingBox(int(x), int(y), int(w), int(h), 0)]


def _draw_furniture(canvas, pieces):
    for kind, x, y, w, h, t, mid in pieces:
        if kind == "shelf":
            _fill_rect(canvas, x, y, w, h, FURNITURE_COLORS["shelf"])
            _fill_rect(canvas, x + t, y + t, w - 2 * t, mid - y - t, FURNITURE_COLORS["shelf_inner"])
            _fill_rect(canvas, x + t, mid + t, w - 2 * t, y + h - t - (mid + t),
                       FURNITURE_COLORS["shelf_inner"])
        elif kind == "table":
            _fill_rect(canvas, x, y, w, t, FURNITURE_COLORS["table"])
            leg_w = max(2, t)
            _fill_rect(canvas, x + 1, y + t, leg_w, h - t, FURNITURE_COLORS["table"])
            _fill_rect(canvas, x + w - leg_w - 1, y + t, leg_w, h - t, FURNITURE_COLORS["table"])
        else:
            back = max(2, h // 3)
            _fill_rect(canvas, x, y - back, w, back + h, FURNITURE_COLORS["sofa"])


def _project_box(box: BoundingBox, shift: int, mirror: bool, width: int, view: int) -> BoundingBox:
    x = box.x - shift
    if mirror:
        x = width - (x + box.w)
    return BoundingBox(int(x), box.y, box.w, box.h, view)


def generate_scene(seed: int, config: GenConfig) -> Scene:
    """Deterministic scene from a seed: furniture, objects, views, boxes."""
    rng = np.random.default_rng(seed)
    size = config.image_size

    pieces, regions = _world_furniture(rng, config)
    n_objects = int(rng.choice(config.object_counts, p=config.count_probs))

    placed = []                    # (shape, color, size_class, region_idx, world box)
    for _ in range(n_objects):
        for attempt in range(60):
            shape = str(rng.choice(SHAPES))
            color = str(rng.choice(list(COLORS)))
            size_class = str(rng.choice(SIZES))
            region_idx = int(rng.integers(len(regions)))
            region = regions[region_idx].boxes[0]
            wf, hf = _OBJECT_DIMS[shape][size_class]
            w, h = config.unit(wf), config.unit(hf)
            if w >= region.w - 2 or h >= region.h:
                continue
            x = int(rng.integers(region.x + 1, region.x + region.w - w - 1))
            y = region.y + region.h - h
            box = BoundingBox(x, y, w, h, 0)
            if all(box_iou(box, other[4]) < 0.4 for other in placed):
                placed.append((shape, color, size_class, region_idx, box))
                break
        else:
            raise GenerationError(f"could not place {n_objects} objects (seed {seed})")

    # render the world once, then crop/mirror per view
    world = np.empty((size, size + config.max_shift, 3), dtype=np.uint8)
    world[:] = BACKGROUND
    _draw_furniture(world, pieces)
    for shape, color, _, _, box in placed:
        _draw_object(world, shape, box.x, box.y, box.w, box.h, COLORS[color])

    base_shift = config.max_shift // 2
    views = [(base_shift, False)]
    while len(views) < config.views:
        cand = (int(rng.integers(0, config.max_shift + 1)), bool(rng.random() < config.mirror_prob))
        if cand not in views:
            views.append(cand)

    images = []
    for shift, mirror in views:
        frame = world[:, shift:shift + size].copy()
        if mirror:
            frame = frame[:, ::-1].copy()
        images.append(frame)

    objects = [
        SceneObject(shape, color, size_class, region_idx,
                    [_project_box(box, s, m, size, j + 1) for j, (s, m) in enumerate(views)])
        for shape, color, size_class, region_idx, box in placed
    ]
    sources = [
        SourceRegion(r.kind, r.part,
                     [_project_box(r.boxes[0], s, m, size, j + 1) for j, (s, m) in enumerate(views)])
        for r in regions
    ]

    target_id = int(rng.integers(len(objects)))
    return Scene(
        scene_id=seed, images=images, objects=objects, sources=sources,
        target_id=target_id, source_id=objects[target_id].region,
    )


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def tokenize(sentence: str) -> list[str]:
    """Lowercase, strip terminal punctuation, split on whitespace."""
    out = []
    for raw in sentence.lower().split():
        word = raw.strip(".,!?")
        if word:
            out.append(word)
    return out


def build_vocab(corpus) -> Vocabulary:
    if not corpus:
        raise ValueError("corpus must be non-empty")
    return Vocabulary.from_sentences(corpus)


# ---------------------------------------------------------------------------
# instruction parsing (the independent referee)
# ---------------------------------------------------------------------------

@dataclass
class ParsedInstruction:
    shape: str
    color: str | None
    size: str | None
    side: str | None              # left | right, relative to the source region
    landmark: tuple | None        # (size, color, shape) of a "closest to" anchor
    source_kind: str
    source_part: str | None


class ParseError(Exception):
    pass


def _parse_np(tokens, pos):
    """Parse "the [size] [color] shape" starting at tokens[pos]."""
    if pos >= len(tokens) or tokens[pos] != "the":
        raise ParseError(f"expected 'the' at position {pos}")
    pos += 1
    size = color = None
    if pos < len(tokens) and tokens[pos] in SIZES:
        size = tokens[pos]
        pos += 1
    if pos < len(tokens) and tokens[pos] in COLORS:
        color = tokens[pos]
        pos += 1
    if pos >= len(tokens) or tokens[pos] not in SHAPES:
        raise ParseError(f"expected a shape noun near position {pos}")
    return (size, color, tokens[pos]), pos + 1


def _parse_source(tokens, pos):
    if pos >= len(tokens) or tokens[pos] != "the":
        raise ParseError("expected 'the' before the source")
    pos += 1
    part = None
    if pos < len(tokens) and tokens[pos] in ("upper", "lower"):
        part = tokens[pos]
        if tokens[pos + 1:pos + 4] != ["part", "of", "the"]:
            raise ParseError("malformed source part phrase")
        pos += 4
    if pos >= len(tokens) or tokens[pos] not in FURNITURE:
        raise ParseError("expected a furniture noun")
    return (tokens[pos], part), pos + 1


def parse_instruction(sentence: str) -> ParsedInstruction:
    tokens = tokenize(sentence)
    try:
        start = tokens.index("the")
    except ValueError:
        raise ParseError("no noun phrase found") from None

    (size, color, shape), pos = _parse_np(tokens, start)
    side = None
    landmark = None

    if tokens[pos:pos + 1] == ["on"] and tokens[pos + 1:pos + 2] == ["the"] \
            and tokens[pos + 2:pos + 3] and tokens[pos + 2] in ("left", "right"):
        side = tokens[pos + 2]
        if tokens[pos + 3:pos + 5] != ["side", "of"]:
            raise ParseError("malformed side phrase")
        (kind, part), pos = _parse_source(tokens, pos + 5)
    elif tokens[pos:pos + 2] == ["closest", "to"]:
        landmark, pos = _parse_np(tokens, pos + 2)
        if tokens[pos:pos + 1] != ["from"]:
            raise ParseError("expected 'from' after the landmark")
        (kind, part), pos = _parse_source(tokens, pos + 1)
    elif tokens[pos:pos + 1] == ["from"]:
        (kind, part), pos = _parse_source(tokens, pos + 1)
    else:
        raise ParseError(f"unrecognized tail at position {pos}")

    if pos != len(tokens):
        raise ParseError("trailing words after the source phrase")
    return ParsedInstruction(shape, color, size, side, landmark, kind, part)


def _attrs_match(obj: SceneObject, size, color, shape) -> bool:
    return (obj.shape == shape
            and (color is None or obj.color == color)
            and (size is None or obj.size == size))


def matching_objects(scene: Scene, parsed: ParsedInstruction, view: int) -> list[int]:
    """Indices of scene objects satisfying the description in one view."""
    candidates = []
    for idx, obj in enumerate(scene.objects):
        region = scene.sources[obj.region]
        if not _attrs_match(obj, parsed.size, parsed.color, parsed.shape):
            continue
        if region.kind != parsed.source_kind or region.part != parsed.source_part:
            continue
        if parsed.side is not None:
            ox = obj.box(view).center[0]
            rx = region.box(view).center[0]
            if parsed.side == "left" and not ox < rx:
                continue
            if parsed.side == "right" and not ox > rx:
                continue
        candidates.append(idx)

    if parsed.landmark is not None:
        l_size, l_color, l_shape = parsed.landmark
        anchors = [o for o in scene.objects if _attrs_match(o, l_size, l_color, l_shape)]
        if len(anchors) != 1:
            return []
        ax, ay = anchors[0].box(view).center
        best, best_d = [], None
        for idx in candidates:
            cx, cy = scene.objects[idx].box(view).center
            d = (cx - ax) ** 2 + (cy - ay) ** 2
            if best_d is None or d < best_d - 1e-9:
                best, best_d = [idx], d
            elif abs(d - best_d) <= 1e-9:
                best.append(idx)
        candidates = best
    return candidates


def check_unique(scene: Scene, sentence: str) -> bool:
    """True iff the sentence picks out exactly the designated target in every view."""
    try:
        parsed = parse_instruction(sentence)
    except ParseError:
        return False
    for view in range(1, len(scene.images) + 1):
        matches = matching_objects(scene, parsed, view)
        if matches != [scene.target_id]:
            return False
    return True


# ---------------------------------------------------------------------------
# instruction generation
# ---------------------------------------------------------------------------

def _np_text(size, color, shape) -> str:
    words = ["the"]
    if size:
        words.append(size)
    if color:
        words.append(color)
    words.append(shape)
    return " ".join(words)


def _candidate_sentences(scene: Scene, rng) -> list[str]:
    """Descriptor candidates in rough order of increasing specificity."""
    target = scene.objects[scene.target_id]
    source = scene.sources[scene.source_id]
    attr_steps = [
        (None, None),
        (None, target.color),
        (target.size, target.color),
        (target.size, None),
    ]
    candidates = []
    for size, color in attr_steps:
        np_text = _np_text(size, color, target.shape)
        candidates.append(f"{np_text} from {source.phrase}")
    for size, color in attr_steps:
        np_text = _np_text(size, color, target.shape)
        for side in ("left", "right"):
            candidates.append(f"{np_text} on the {side} side of {source.phrase}")

    # distance anchors are view-independent, so they always stay valid
    others = [o for i, o in enumerate(scene.objects) if i != scene.target_id]
    others = [others[i] for i in rng.permutation(len(others))]
    for anchor in others:
        for l_size, l_color in [(None, None), (None, anchor.color), (anchor.size, anchor.color)]:
            mark = _np_text(l_size, l_color, anchor.shape)
            for size, color in attr_steps[:2]:
                np_text = _np_text(size, color, target.shape)
                candidates.append(f"{np_text} closest to {mark} from {source.phrase}")
    return candidates


def generate_instruction(scene: Scene, style_seed: int) -> str:
    """One verified instruction sentence for the scene's designated target."""
    rng = np.random.default_rng(style_seed)
    verb = " ".join(VERBS[int(rng.integers(len(VERBS)))])
    passing = [c for c in _candidate_sentences(scene, rng) if check_unique(scene, f"{verb} {c}")]
    if not passing:
        raise AnnotationError(f"no unambiguous description for scene {scene.scene_id}")
    # prefer a color-bearing description most of the time; it reads naturally
    described = [c for c in passing if scene.objects[scene.target_id].color in c.split()]
    if described and rng.random() > 0.25:
        return f"{verb} {described[0]}"
    return f"{verb} {passing[0]}"


def make_references(scene: Scene, seed: int, config: GenConfig) -> list[str]:
    refs = [generate_instruction(scene, seed)]
    offset = 1
    while len(refs) < config.refs_per_target:
        candidate = generate_instruction(scene, seed + offset)
        if candidate not in refs or offset > 12:
            refs.append(candidate)
        offset += 1
    return refs


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class DatasetBundle:
    master_seed: int
    config: GenConfig
    vocab: Vocabulary
    scenes: list
    annotations: list
    splits: dict

    def scene_by_id(self, scene_id: int) -> Scene:
        for scene in self.scenes:
            if scene.scene_id == scene_id:
                return scene
        raise KeyError(f"scene {scene_id} not in dataset")

    def annotation_by_id(self, scene_id: int) -> Annotation:
        for ann in self.annotations:
            if ann.scene_id == scene_id:
                return ann
        raise KeyError(f"annotation for scene {scene_id} not in dataset")


def generate_dataset(master_seed: int, n_scenes: int, config: GenConfig = GenConfig()) -> DatasetBundle:
    """Deterministic dataset: scenes, verified references, vocab, split."""
    seed_rng = np.random.default_rng(master_seed)
    scenes, annotations = [], []
    used_seeds = set()
    attempts = 0
    while len(scenes) < n_scenes:
        attempts += 1
        if attempts > 30 * n_scenes + 50:
            raise GenerationError("too many rejected scenes; loosen the config")
        seed = int(seed_rng.integers(1, 2 ** 31))
        if seed in used_seeds:
            continue
        used_seeds.add(seed)
        try:
            scene = generate_scene(seed, config)
            refs = make_references(scene, seed, config)
        except (GenerationError, AnnotationError):
            continue
        scenes.append(scene)
        annotations.append(Annotation(scene.scene_id, refs))

    order = np.random.default_rng((master_seed, 1)).permutation(len(scenes))
    n_val = 0
    if config.val_fraction > 0 and len(scenes) > 1:
        n_val = max(1, round(config.val_fraction * len(scenes)))
    val_ids = sorted(scenes[i].scene_id for i in order[:n_val])
    train_ids = sorted(scenes[i].scene_id for i in order[n_val:])
    splits = {"train": train_ids, "val": val_ids}

    train_set = set(train_ids)
    corpus = [tokenize(s) for ann in annotations if ann.scene_id in train_set
              for s in ann.sentences]
    vocab = build_vocab(corpus)
    for ann in annotations:
        ann.token_ids = [vocab.encode(tokenize(s)) for s in ann.sentences]
    return DatasetBundle(master_seed, config, vocab, scenes, annotations, splits)


# ---------------------------------------------------------------------------
# image file format
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an H×W×3 uint8 image")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path} is not a binary PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1                      # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} in {path}")
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise ValueError(f"{path} is truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of an H×W×C array."""
    in_h, in_w = image.shape[:2]
    rows = np.minimum((np.arange(out_h) + 0.5) * in_h / out_h, in_h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * in_w / out_w, in_w - 1).astype(int)
    return image[rows][:, cols]


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


def _boxes_json(boxes) -> list:
    return [b.as_list() for b in boxes]


def _boxes_load(rows, views) -> list:
    return [BoundingBox(int(x), int(y), int(w), int(h), j + 1)
            for j, (x, y, w, h) in enumerate(rows)][:views]


def save_dataset(bundle: DatasetBundle, directory) -> dict:
    """Write manifest.json, vocab.txt and PPM images; returns the manifest."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    bundle.vocab.save(root / "vocab.txt")

    samples = []
    for scene, ann in zip(bundle.scenes, bundle.annotations):
        paths = []
        for j, image in enumerate(scene.images, start=1):
            rel = f"images/scene{scene.scene_id:010d}_view{j}.ppm"
            write_ppm(root / rel, image)
            paths.append(rel)
        samples.append({
            "scene_id": scene.scene_id,
            "images": paths,
            "objects": [
                {"shape": o.shape, "color": o.color, "size": o.size,
                 "region": o.region, "boxes": _boxes_json(o.boxes)}
                for o in scene.objects
            ],
            "sources": [
                {"kind": s.kind, "part": s.part, "boxes": _boxes_json(s.boxes)}
                for s in scene.sources
            ],
            "target": scene.target_id,
            "source": scene.source_id,
            "sentences": ann.sentences,
            "token_ids": ann.token_ids,
        })

    manifest = {
        "version": MANIFEST_VERSION,
        "master_seed": bundle.master_seed,
        "config": asdict(bundle.config),
        "vocab_file": "vocab.txt",
        "splits": bundle.splits,
        "samples": samples,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load_dataset(directory) -> DatasetBundle:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)

    for key in ("version", "master_seed", "config", "splits", "samples", "vocab_file"):
        if key not in manifest:
            raise ValueError(f"manifest is missing the '{key}' field")
    if manifest["version"] != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest['version']}")

    raw_cfg = dict(manifest["config"])
    for tup in ("object_counts", "count_probs"):
        raw_cfg[tup] = tuple(raw_cfg[tup])
    config = GenConfig(**raw_cfg)
    vocab = Vocabulary.load(root / manifest["vocab_file"])

    scenes, annotations = [], []
    for rec in manifest["samples"]:
        views = len(rec["images"])
        images = []
        for rel in rec["images"]:
            path = root / rel
            if not path.exists():
                raise FileNotFoundError(f"image listed in manifest is missing: {path}")
            images.append(read_ppm(path))
        objects = [
            SceneObject(o["shape"], o["color"], o["size"], o["region"],
                        _boxes_load(o["boxes"], views))
            for o in rec["objects"]
        ]
        sources = [
            SourceRegion(s["kind"], s["part"], _boxes_load(s["boxes"], views))
            for s in rec["sources"]
        ]
        scene = Scene(rec["scene_id"], images, objects, sources, rec["target"], rec["source"])
        ann = Annotation(rec["scene_id"], list(rec["sentences"]),
                         [list(t) for t in rec["token_ids"]])
        expected = [vocab.encode(tokenize(s)) for s in ann.sentences]
        if expected != ann.token_ids:
            raise ValueError(f"token ids for scene {rec['scene_id']} do not match the vocabulary")
        scenes.append(scene)
        annotations.append(ann)

    return DatasetBundle(manifest["master_seed"], config, vocab, scenes, annotations,
                         dict(manifest["splits"]))


def manifest_digest(directory) -> str:
    """Hex digest of the canonical manifest serialization."""
    with open(Path(directory) / "manifest.json", "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
