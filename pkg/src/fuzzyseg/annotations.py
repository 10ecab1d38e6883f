"""Weak-annotation files and synthesis of weak labels from dense ground truth.

The JSON schema speaks class names so files stay portable across datasets
with different index orders; everything in memory uses integer indices.
Synthesis covers tight boxes from class extremes, k random points per
present class, and box jitter targeting a fixed overlap fraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .formulas import BoundingBox, Scribble


@dataclass
class AnnotationSet:
    class_names: tuple
    background_class: int
    boxes: tuple = ()
    scribbles: tuple = ()
    points: tuple = ()  # (i, j, class index)

    def __post_init__(self) -> None:
        self.class_names = tuple(str(n) for n in self.class_names)
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate class names")
        self.boxes = tuple(self.boxes)
        self.scribbles = tuple(self.scribbles)
        self.points = tuple((int(i), int(j), int(c)) for i, j, c in self.points)
        c = len(self.class_names)
        if not 0 <= self.background_class < c:
            raise ValueError(f"background_class {self.background_class} outside [0, {c})")
        for k, b in enumerate(self.boxes):
            if b.target_class >= c:
                raise ValueError(f"boxes[{k}].class: index {b.target_class} outside [0, {c})")
        for k, s in enumerate(self.scribbles):
            if s.target_class >= c:
                raise ValueError(f"scribbles[{k}].class: index {s.target_class} outside [0, {c})")
        for k, (i, j, cl) in enumerate(self.points):
            if i < 0 or j < 0:
                raise ValueError(f"points[{k}]: negative coordinate ({i}, {j})")
            if not 0 <= cl < c:
                raise ValueError(f"points[{k}].class: index {cl} outside [0, {c})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate_bounds(self, h: int, w: int) -> None:
        for k, b in enumerate(self.boxes):
            if b.i2 >= h or b.j2 >= w:
                raise ValueError(f"boxes[{k}]: corner (i2={b.i2}, j2={b.j2}) outside {h}x{w}")
        for k, s in enumerate(self.scribbles):
            for i, j in s.pixels:
                if i >= h or j >= w:
                    raise ValueError(f"scribbles[{k}]: pixel ({i}, {j}) outside {h}x{w}")
        for k, (i, j, _) in enumerate(self.points):
            if i >= h or j >= w:
                raise ValueError(f"points[{k}]: ({i}, {j}) outside {h}x{w}")

    def points_as_scribbles(self) -> tuple:
        """Single-pixel scribbles, one per point; keeps one constraint code path."""
        return tuple(Scribble(pixels=((i, j),), target_class=c) for i, j, c in self.points)

    def all_scribbles(self) -> tuple:
        return self.scribbles + self.points_as_scribbles()


def load_annotations(path, h: int | None = None, w: int | None = None) -> AnnotationSet:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc

    names = raw.get("classes")
    if not isinstance(names, list) or not names:
        raise ValueError(f"{path}: classes: must be a non-empty list of names")
    index = {str(n): k for k, n in enumerate(names)}

    def class_index(name, where):
        if str(name) not in index:
            raise ValueError(f"{path}: {where}: unknown class name {name!r}")
        return index[str(name)]

    background = class_index(raw.get("background"), "background")

    boxes = []
    for k, b in enumerate(raw.get("boxes", [])):
        where = f"boxes[{k}]"
        cls = class_index(b.get("class"), where + ".class")
        try:
            boxes.append(
                BoundingBox(int(b["i1"]), int(b["j1"]), int(b["i2"]), int(b["j2"]), cls)
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: {where}: missing or bad corner field: {exc}") from exc
        except ValueError as exc:
            raise ValueError(f"{path}: {where}: {exc}") from exc

    scribbles = []
    for k, s in enumerate(raw.get("scribbles", [])):
        where = f"scribbles[{k}]"
        cls = class_index(s.get("class"), where + ".class")
        pixels = s.get("pixels")
        if not isinstance(pixels, list) or not pixels:
            raise ValueError(f"{path}: {where}.pixels: must be a non-empty list")
        try:
            scribbles.append(Scribble(pixels=tuple((int(i), int(j)) for i, j in pixels), target_class=cls))
        except ValueError as exc:
            raise ValueError(f"{path}: {where}: {exc}") from exc

    points = []
    for k, pt in enumerate(raw.get("points", [])):
        where = f"points[{k}]"
        cls = class_index(pt.get("class"), where + ".class")
        i, j = int(pt["i"]), int(pt["j"])
        if i < 0 or j < 0:
            raise ValueError(f"{path}: {where}: negative coordinate ({i}, {j})")
        points.append((i, j, cls))

    ann = AnnotationSet(
        class_names=tuple(str(n) for n in names),
        background_class=background,
        boxes=tuple(boxes),
        scribbles=tuple(scribbles),
        points=tuple(points),
    )
    if h is not None and w is not None:
        ann.validate_bounds(h, w)
    return ann


def save_annotations(path, ann: AnnotationSet) -> None:
    names = ann.class_names
    doc = {
        "classes": list(names),
        "background": names[ann.background_class],
        "boxes": [
            {"class": names[b.target_class], "i1": b.i1, "j1": b.j1, "i2": b.i2, "j2": b.j2}
            for b in ann.boxes
        ],
        "scribbles": [
            {"class": names[s.target_class], "pixels": [[i, j] for i, j in s.pixels]}
            for s in ann.scribbles
        ],
        "points": [{"class": names[c], "i": i, "j": j} for i, j, c in ann.points],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# Synthesis from dense ground truth

def derive_boxes_from_gt(gt: np.ndarray, background_class: int = 0) -> list:
    """Tight box per present non-background class, spanning its extreme coords."""
    gt = np.asarray(gt)
    boxes = []
    for cls in np.unique(gt):
        cls = int(cls)
        if cls == background_class:
            continue
        rows, cols = np.nonzero(gt == cls)
        boxes.append(
            BoundingBox(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()), cls)
        )
    return boxes


def sample_points_from_gt(gt: np.ndarray, k: int, seed: int) -> list:
    """k distinct points per present class (background included), deterministic."""
    gt = np.asarray(gt)
    rng = np.random.default_rng(seed)
    points = []
    for cls in np.unique(gt):
        cls = int(cls)
        rows, cols = np.nonzero(gt == cls)
        n = len(rows)
        take = min(k, n)
        chosen = rng.choice(n, size=take, replace=False)
        chosen.sort()
        points.extend((int(rows[t]), int(cols[t]), cls) for t in chosen)
    return points


@dataclass(frozen=True)
class JitterSpec:
    target_overlap: float
    rng_seed: int = 0
    max_draws: int = 10_000
    tolerance: float = 0.02

    def __post_init__(self) -> None:
        if not 0.0 < self.target_overlap <= 1.0:
            raise ValueError(f"target_overlap must be in (0, 1], got {self.target_overlap}")


@dataclass(frozen=True)
class JitterResult:
    box: BoundingBox
    overlap: float
    fell_back: bool


def jitter_box(box: BoundingBox, gt: np.ndarray, spec: JitterSpec) -> JitterResult:
    """Perturb box edges until overlap with the class region hits the target.

    Overlap is |region inside box| / |region|. Candidates jitter all four
    edges independently (so both translation and scaling happen); the first
    candidate within the tolerance wins, which keeps the draw deterministic
    per seed. If no candidate lands within spec.max_draws draws, the tight
    box comes back with fell_back set.
    """
    gt = np.asarray(gt)
    h, w = gt.shape
    rows, cols = np.nonzero(gt == box.target_class)
    if len(rows) == 0:
        raise ValueError(f"class {box.target_class} absent from gt")
    region = float(len(rows))

    def overlap_of(b: BoundingBox) -> float:
        inside = (rows >= b.i1) & (rows <= b.i2) & (cols >= b.j1) & (cols <= b.j2)
        return float(inside.sum()) / region

    if abs(1.0 - spec.target_overlap) <= spec.tolerance:
        return JitterResult(box=box, overlap=overlap_of(box), fell_back=False)

    rng = np.random.default_rng(spec.rng_seed)
    s_i = max(1, (box.i2 - box.i1 + 1) // 2 + 1)
    s_j = max(1, (box.j2 - box.j1 + 1) // 2 + 1)
    for _ in range(spec.max_draws):
        d = rng.integers(-s_i, s_i + 1), rng.integers(-s_j, s_j + 1), \
            rng.integers(-s_i, s_i + 1), rng.integers(-s_j, s_j + 1)
        i1 = max(0, box.i1 + int(d[0]))
        j1 = max(0, box.j1 + int(d[1]))
        i2 = min(h - 1, box.i2 + int(d[2]))
        j2 = min(w - 1, box.j2 + int(d[3]))
        if i1 > i2 or j1 > j2:
            continue
        cand = BoundingBox(i1, j1, i2, j2, box.target_class)
        ov = overlap_of(cand)
        if abs(ov - spec.target_overlap) <= spec.tolerance:
            return JitterResult(box=cand, overlap=ov, fell_back=False)
    return JitterResult(box=box, overlap=overlap_of(box), fell_back=True)


# ---------------------------------------------------------------------------
# Mask and image files: 8-bit binary PGM/PPM

def _read_header_tokens(f, count):
    """Next `count` whitespace-separated tokens, skipping # comments."""
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens


def read_mask(path) -> np.ndarray:
    """Label map from an 8-bit binary PGM; pixel value = class index."""
    with open(path, "rb") as f:
        magic = f.readline().split(b"#", 1)[0].strip()
        if magic != b"P5":
            raise ValueError(f"{path}: expected binary PGM (P5), got {magic!r}")
        w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if maxval > 255:
            raise ValueError(f"{path}: 16-bit PGM not supported (maxval {maxval})")
        raw = f.read(h * w)
    if len(raw) != h * w:
        raise ValueError(f"{path}: payload has {len(raw)} bytes, expected {h * w}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.int64)


def write_mask(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("class indices must fit in 8 bits")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(labels.astype(np.uint8).tobytes(order="C"))


def read_image(path) -> np.ndarray:
    """Grayscale PGM (P5) or RGB PPM (P6) as float array in [0, 1], H x W x C."""
    with open(path, "rb") as f:
        magic = f.readline().split(b"#", 1)[0].strip()
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: expected P5 or P6, got {magic!r}")
        w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if maxval > 255:
            raise ValueError(f"{path}: 16-bit images not supported")
        channels = 1 if magic == b"P5" else 3
        raw = f.read(h * w * channels)
    if len(raw) != h * w * channels:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return arr.astype(np.float64) / maxval


def write_image(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {c}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n" if c == 1 else b"P6\n")
        f.write(b"%d %d\n255\n" % (w, h))
        f.write(data.tobytes(order="C"))
