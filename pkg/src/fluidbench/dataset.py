"""Synthetic captioned-shapes dataset.

Scenes hold up to three colored shapes on a 2x2 cell layout over a gray
background.  Rendering is deterministic and anti-aliasing free, captions are
template text over a closed vocabulary, and the train/validation split hashes
the caption so no validation caption ever appears in training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import stream

__all__ = [
    "Scene", "SceneObject", "Caption", "SHAPES", "COLORS", "GRAYS", "SIZES",
    "VOCAB", "PAD_ID", "MAX_CAPTION_LEN", "NULL_CAPTION",
    "sample_scene", "render", "caption_of", "parse_caption",
    "caption_ids", "encode_caption", "is_validation", "validation_scenes",
    "train_scene_stream", "write_manifest",
]

IMAGE_SIZE = 32
CELL = IMAGE_SIZE // 2

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
}
GRAYS = (0.40, 0.50, 0.60)
SIZES = ("small", "large")
_HALF = {"small": 4, "large": 6}

VOCAB = ("<pad>", "a", "two", "three",
         "red", "green", "blue", "yellow",
         "circle", "square", "triangle",
         "circles", "squares", "triangles",
         "left", "of", "above", "and")
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 0
MAX_CAPTION_LEN = 16
_PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles"}
_SINGULAR = {v: k for k, v in _PLURAL.items()}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple  # (row, col) in the 2x2 layout
    size: str


@dataclass(frozen=True)
class Scene:
    objects: tuple  # of SceneObject, reading order by cell
    background: float

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects share a layout cell")
        if len(cells) > 4:
            raise ValueError("too many objects")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES:
                raise ValueError(f"bad object attributes {o}")


@dataclass(frozen=True)
class Caption:
    ids: tuple

    @property
    def words(self) -> tuple:
        return tuple(VOCAB[i] for i in self.ids)

    def text(self) -> str:
        return " ".join(w for w in self.words if w != "<pad>")


NULL_CAPTION = Caption(ids=())


def sample_scene(seed: int, index: int) -> Scene:
    """Deterministic scene draw: count uniform in {1,2,3}, attributes uniform."""
    r = stream(seed, "scene", int(index))
    count = int(r.integers(1, 4))
    cell_ids = r.choice(4, size=count, replace=False)
    objs = []
    for c in cell_ids:
        objs.append(SceneObject(
            shape=SHAPES[int(r.integers(len(SHAPES)))],
            color=list(COLORS)[int(r.integers(len(COLORS)))],
            cell=(int(c) // 2, int(c) % 2),
            size=SIZES[int(r.integers(len(SIZES)))],
        ))
    objs.sort(key=lambda o: o.cell)
    background = GRAYS[int(r.integers(len(GRAYS)))]
    return Scene(objects=tuple(objs), background=background)


def _shape_mask(shape: str, half: int) -> np.ndarray:
    """Boolean (CELL, CELL) stencil centered at (CELL/2, CELL/2)."""
    c = CELL // 2
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    dy, dx = yy - c, xx - c
    if shape == "square":
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "circle":
        return dy * dy + dx * dx <= half * half
    if shape == "triangle":
        # apex up: half-width grows from 0 at the top row to `half` at the base
        width = (dy + half) // 2
        return (np.abs(dy) <= half) & (np.abs(dx) <= width)
    raise ValueError(f"unknown shape {shape!r}")


_STENCILS = {(s, h): _shape_mask(s, h) for s in SHAPES for h in _HALF.values()}


def render(scene: Scene) -> np.ndarray:
    """Rasterize to a (32, 32, 3) float image in [0,1]."""
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), scene.background, dtype=np.float64)
    for o in scene.objects:
        r0, c0 = o.cell[0] * CELL, o.cell[1] * CELL
        m = _STENCILS[(o.shape, _HALF[o.size])]
        img[r0:r0 + CELL, c0:c0 + CELL][m] = COLORS[o.color]
    return img


def _words_of(scene: Scene) -> tuple:
    objs = scene.objects
    if not objs:
        return ()
    kinds = {(o.color, o.shape) for o in objs}
    if len(objs) == 2 and len(kinds) == 1:
        c, s = next(iter(kinds))
        return ("two", c, _PLURAL[s])
    if len(objs) == 3 and len(kinds) == 1:
        c, s = next(iter(kinds))
        return ("three", c, _PLURAL[s])
    if len(objs) == 2:
        a, b = objs
        if a.cell[0] == b.cell[0]:  # same row: reading order puts the left one first
            return ("a", a.color, a.shape, "left", "of", "a", b.color, b.shape)
        if a.cell[1] == b.cell[1]:
            return ("a", a.color, a.shape, "above", "a", b.color, b.shape)
    words = []
    for i, o in enumerate(objs):
        if i:
            words.append("and")
        words.extend(("a", o.color, o.shape))
    return tuple(words)


def caption_of(scene: Scene) -> Caption:
    words = _words_of(scene)
    if len(words) > MAX_CAPTION_LEN:
        raise ValueError("caption template exceeded the maximum length")
    return Caption(ids=tuple(_WORD_ID[w] for w in words))


@dataclass(frozen=True)
class CaptionFacts:
    """What a caption asserts: (color, shape) items plus an optional relation."""
    items: tuple          # of (color, shape), caption order
    count: int
    counted: bool         # caption used an explicit numeral
    relation: str | None  # "left_of" | "above" between items[0] and items[1]


def parse_caption(caption: Caption) -> CaptionFacts:
    words = [w for w in caption.words if w != "<pad>"]
    if not words:
        return CaptionFacts(items=(), count=0, counted=False, relation=None)
    if words[0] in ("two", "three"):
        n = 2 if words[0] == "two" else 3
        color, plural = words[1], words[2]
        return CaptionFacts(items=tuple([(color, _SINGULAR[plural])] * n),
                            count=n, counted=True, relation=None)
    relation = None
    if "left" in words:
        relation = "left_of"
    elif "above" in words:
        relation = "above"
    items = []
    i = 0
    while i < len(words):
        if words[i] == "a":
            items.append((words[i + 1], words[i + 2]))
            i += 3
        else:
            i += 1
    return CaptionFacts(items=tuple(items), count=len(items),
                        counted=False, relation=relation)


def caption_ids(caption: Caption, max_len: int = MAX_CAPTION_LEN) -> np.ndarray:
    """Pad caption ids to fixed length with the pad id."""
    ids = list(caption.ids)
    if len(ids) > max_len:
        raise ValueError(f"caption length {len(ids)} exceeds {max_len}")
    for i in ids:
        if not (0 <= i < len(VOCAB)):
            raise ValueError(f"token id {i} outside the vocabulary")
    return np.array(ids + [PAD_ID] * (max_len - len(ids)), dtype=np.int64)


def encode_caption(caption: Caption, table: T.Tensor, max_len: int = MAX_CAPTION_LEN) -> T.Tensor:
    """Embed a caption: one vector per slot, pad slots share the learned pad row."""
    if table.data.shape[0] != len(VOCAB):
        raise ValueError(f"embedding table has {table.data.shape[0]} rows, vocab needs {len(VOCAB)}")
    return T.embedding(caption_ids(caption, max_len), table)


# --- split ------------------------------------------------------------------

def _caption_bucket(seed: int, caption: Caption) -> int:
    h = hashlib.sha256(f"{seed}|{' '.join(caption.words)}".encode()).digest()
    return int.from_bytes(h[:8], "little") % 100


def is_validation(seed: int, scene: Scene) -> bool:
    """Split on the caption hash so validation captions never occur in training."""
    return _caption_bucket(seed, caption_of(scene)) < 5


def validation_scenes(seed: int, count: int = 512) -> list:
    """First `count` validation-split scenes by scan order, with their indices."""
    out = []
    idx = 0
    while len(out) < count:
        s = sample_scene(seed, idx)
        if is_validation(seed, s):
            out.append((idx, s))
        idx += 1
        if idx > 1_000_000:
            raise RuntimeError("validation scan did not terminate")
    return out


def train_scene_stream(seed: int, start_index: int = 0):
    """Yield (index, scene) over training-split indices in scan order."""
    idx = start_index
    while True:
        s = sample_scene(seed, idx)
        if not is_validation(seed, s):
            yield idx, s
        idx += 1


def write_manifest(path, seed: int, val_count: int = 512):
    """Record the split so a run is reproducible without storing pixels."""
    val = validation_scenes(seed, val_count)
    with open(path, "w") as f:
        f.write(f"seed={seed}\n")
        f.write("split=caption-sha256-mod-100<5\n")
        f.write(f"val_count={val_count}\n")
        f.write(f"val_scan_end={val[-1][0]}\n")
        f.write("val_indices=" + ",".join(str(i) for i, _ in val) + "\n")
        f.write("train_indices=complement-of-validation-captions\n")
