"""Propositional constraints over pixel label maps.

A Formula is a tree of and/or/not/implies nodes over two kinds of atoms:
"pixel (i, j) has class c" and "pixels (i, j) and (i2, j2) share a label".
Builders turn weak annotations (scribbles, boxes, superpixels) into trees.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field

import numpy as np

OPS = ("and", "or", "not", "implies", "class_atom", "eq_atom")


@dataclass(eq=False)
class Formula:
    op: str
    children: tuple = ()
    i: int | None = None
    j: int | None = None
    c: int | None = None
    i2: int | None = None
    j2: int | None = None
    label: str | None = None
    # slot for the fuzzy engine's compiled form; not part of the tree's value
    _compiled: object = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}")
        self.children = tuple(self.children)
        if self.op == "class_atom":
            if self.children or None in (self.i, self.j, self.c):
                raise ValueError("class_atom needs i, j, c and no children")
        elif self.op == "eq_atom":
            if self.children or None in (self.i, self.j, self.i2, self.j2):
                raise ValueError("eq_atom needs i, j, i2, j2 and no children")
            if (self.i, self.j) == (self.i2, self.j2):
                raise ValueError("eq_atom endpoints must be distinct pixels")
        elif self.op == "not":
            if len(self.children) != 1:
                raise ValueError("not takes exactly one child")
        elif self.op == "implies":
            if len(self.children) != 2:
                raise ValueError("implies takes exactly two children")
        elif self.op == "or":
            # empty disjunction would be silently-false; reject it
            if not self.children:
                raise ValueError("or needs at least one child")
        # empty conjunction is allowed and means "true"

    @property
    def is_atom(self) -> bool:
        return self.op in ("class_atom", "eq_atom")


def ClassAtom(i: int, j: int, c: int) -> Formula:
    return Formula("class_atom", i=int(i), j=int(j), c=int(c))


def EqualityAtom(i: int, j: int, i2: int, j2: int) -> Formula:
    # normalize so each unordered pixel pair has one canonical atom
    a, b = (int(i), int(j)), (int(i2), int(j2))
    if b < a:
        a, b = b, a
    return Formula("eq_atom", i=a[0], j=a[1], i2=b[0], j2=b[1])


def And(children, label: str | None = None) -> Formula:
    return Formula("and", children=tuple(children), label=label)


def Or(children, label: str | None = None) -> Formula:
    return Formula("or", children=tuple(children), label=label)


def Not(child: Formula) -> Formula:
    return Formula("not", children=(child,))


def Implies(antecedent: Formula, consequent: Formula) -> Formula:
    return Formula("implies", children=(antecedent, consequent))


def walk(root: Formula):
    """Yield every node reachable from root, pre-order, without recursion."""
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def formula_size(root: Formula) -> int:
    return sum(1 for _ in walk(root))


# ---------------------------------------------------------------------------
# Annotation geometry

@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel bounds plus the class the box is drawn around."""

    i1: int
    j1: int
    i2: int
    j2: int
    target_class: int

    def __post_init__(self) -> None:
        if self.i1 < 0 or self.j1 < 0:
            raise ValueError(f"box corner out of bounds: {self}")
        if self.i1 > self.i2 or self.j1 > self.j2:
            raise ValueError(f"box corners out of order: {self}")
        if self.target_class < 0:
            raise ValueError(f"negative class index: {self}")

    @property
    def height(self) -> int:
        return self.i2 - self.i1 + 1

    @property
    def width(self) -> int:
        return self.j2 - self.j1 + 1

    def contains(self, i: int, j: int) -> bool:
        return self.i1 <= i <= self.i2 and self.j1 <= j <= self.j2

    def pixels(self):
        for i in range(self.i1, self.i2 + 1):
            for j in range(self.j1, self.j2 + 1):
                yield i, j


@dataclass(frozen=True)
class Scribble:
    """A set of marked pixels, all carrying the same class."""

    pixels: tuple
    target_class: int

    def __post_init__(self) -> None:
        px = tuple(sorted({(int(i), int(j)) for i, j in self.pixels}))
        if not px:
            raise ValueError("scribble has no pixels")
        if any(i < 0 or j < 0 for i, j in px):
            raise ValueError("scribble pixel out of bounds")
        object.__setattr__(self, "pixels", px)
        if self.target_class < 0:
            raise ValueError("negative class index")


@dataclass
class SuperpixelMap:
    """Per-pixel superpixel indices; indices are contiguous 0..K-1."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValueError(f"superpixel map must be 2-d, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            f = np.asarray(arr, dtype=np.float64)
            if not np.array_equal(f, np.round(f)):
                raise ValueError("superpixel indices must be exact integers")
            arr = f.astype(np.int64)
        arr = np.ascontiguousarray(arr, dtype=np.int64)
        if arr.min() < 0:
            raise ValueError("negative superpixel index")
        k = int(arr.max()) + 1
        present = np.bincount(arr.ravel(), minlength=k)
        if (present == 0).any():
            missing = int(np.flatnonzero(present == 0)[0])
            raise ValueError(f"superpixel index {missing} unused; indices must be contiguous")
        self.labels = arr

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_superpixels(self) -> int:
        return int(self.labels.max()) + 1


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    """Re-index arbitrary non-negative labels to contiguous 0..K-1, order-preserving."""
    arr = np.ascontiguousarray(labels, dtype=np.int64)
    uniq = np.unique(arr)
    lut = np.zeros(int(uniq.max()) + 1, dtype=np.int64)
    lut[uniq] = np.arange(len(uniq))
    return lut[arr]


@dataclass(frozen=True)
class EllipseRegion:
    """Inscribed ellipse of a box: center and radii in pixel coordinates."""

    c_y: float
    c_x: float
    r_y: float
    r_x: float
    box: BoundingBox

    def __post_init__(self) -> None:
        if self.r_y <= 0 or self.r_x <= 0:
            raise ValueError(f"degenerate ellipse radii r_y={self.r_y}, r_x={self.r_x}")

    @classmethod
    def inscribed(cls, box: BoundingBox) -> "EllipseRegion":
        r_y = (box.i2 - box.i1) / 2.0
        r_x = (box.j2 - box.j1) / 2.0
        if r_y <= 0 or r_x <= 0:
            raise ValueError(f"box too thin for an inscribed ellipse: {box}")
        return cls(
            c_y=(box.i1 + box.i2) / 2.0,
            c_x=(box.j1 + box.j2) / 2.0,
            r_y=r_y,
            r_x=r_x,
            box=box,
        )

    def strictly_outside(self, i: int, j: int) -> bool:
        # boundary ties count as inside
        d = ((i - self.c_y) / self.r_y) ** 2 + ((j - self.c_x) / self.r_x) ** 2
        return d > 1.0


def moore_neighbors(i: int, j: int, h: int, w: int) -> list:
    """In-bounds 8-neighborhood of (i, j), row-major order."""
    out = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w:
                out.append((ni, nj))
    return out


# ---------------------------------------------------------------------------
# Constraint builders

def build_full_supervision(gt: np.ndarray, num_classes: int) -> Formula:
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise ValueError(f"label map must be 2-d, got shape {gt.shape}")
    if gt.min() < 0 or gt.max() >= num_classes:
        raise ValueError(f"label map contains class outside [0, {num_classes})")
    h, w = gt.shape
    atoms = [ClassAtom(i, j, int(gt[i, j])) for i in range(h) for j in range(w)]
    return And(atoms, label="fs")


def build_scribble(s: Scribble) -> Formula:
    return And(
        [ClassAtom(i, j, s.target_class) for i, j in s.pixels],
        label="scribbles",
    )


def build_bbox_shallow(b: BoundingBox) -> Formula:
    return Or(
        [ClassAtom(i, j, b.target_class) for i, j in b.pixels()],
        label="bbox_shallow",
    )


def build_bbox_tight(b: BoundingBox) -> Formula:
    # tightness: the target class appears in every row and every column
    rows = [
        Or([ClassAtom(i, j, b.target_class) for j in range(b.j1, b.j2 + 1)])
        for i in range(b.i1, b.i2 + 1)
    ]
    cols = [
        Or([ClassAtom(i, j, b.target_class) for i in range(b.i1, b.i2 + 1)])
        for j in range(b.j1, b.j2 + 1)
    ]
    return And([And(rows), And(cols)], label="bbox")


def build_background(h: int, w: int, boxes, background_class: int) -> Formula:
    covered = np.zeros((h, w), dtype=bool)
    for b in boxes:
        if b.i2 >= h or b.j2 >= w:
            raise ValueError(f"box {b} exceeds {h}x{w} grid")
        covered[b.i1 : b.i2 + 1, b.j1 : b.j2 + 1] = True
    atoms = [
        ClassAtom(i, j, background_class)
        for i in range(h)
        for j in range(w)
        if not covered[i, j]
    ]
    return And(atoms, label="background")


@functools.lru_cache(maxsize=64)
def build_neighborhood(h: int, w: int) -> Formula:
    """Every pixel agrees with at least one Moore neighbor.

    Cached per grid shape: the tree depends only on (h, w), and it is by far
    the cheapest way to share work across a dataset of equally sized images.
    """
    if h < 1 or w < 1:
        raise ValueError(f"bad grid {h}x{w}")
    if h == 1 and w == 1:
        raise ValueError("1x1 grid has no neighbor pairs")
    clauses = []
    for i in range(h):
        for j in range(w):
            nbrs = moore_neighbors(i, j, h, w)
            clauses.append(Or([EqualityAtom(i, j, ni, nj) for ni, nj in nbrs]))
    return And(clauses, label="neighborhood")


@functools.lru_cache(maxsize=64)
def build_fill(h: int, w: int) -> Formula:
    """If all of a pixel's neighbors agree with each other, the pixel joins them.

    The antecedent ranges over unordered distinct neighbor pairs; identical
    and symmetric pairs add nothing to the conjunction.
    """
    if h < 1 or w < 1:
        raise ValueError(f"bad grid {h}x{w}")
    clauses = []
    for i in range(h):
        for j in range(w):
            nbrs = moore_neighbors(i, j, h, w)
            pair_atoms = []
            for a in range(len(nbrs)):
                for b in range(a + 1, len(nbrs)):
                    (i1, j1), (i2, j2) = nbrs[a], nbrs[b]
                    pair_atoms.append(EqualityAtom(i1, j1, i2, j2))
            consequent = And([EqualityAtom(i, j, ni, nj) for ni, nj in nbrs])
            clauses.append(Implies(And(pair_atoms), consequent))
    return And(clauses, label="fill")


def build_borders(sp: SuperpixelMap) -> Formula:
    """Neighboring pixels inside one superpixel share a label.

    The superpixel test is data, not a random variable, so it is decided here
    at build time; only the equality consequents reach the formula. Each
    unordered pair is emitted once.
    """
    h, w = sp.height, sp.width
    lab = sp.labels
    atoms = []
    # forward half of the Moore stencil covers each unordered pair exactly once
    for di, dj in ((0, 1), (1, -1), (1, 0), (1, 1)):
        i_lo, i_hi = max(0, -di), min(h, h - di)
        j_lo, j_hi = max(0, -dj), min(w, w - dj)
        for i in range(i_lo, i_hi):
            for j in range(j_lo, j_hi):
                if lab[i, j] == lab[i + di, j + dj]:
                    atoms.append(EqualityAtom(i, j, i + di, j + dj))
    return And(atoms, label="borders")


def build_corners(b: BoundingBox) -> Formula:
    """Box pixels strictly outside the inscribed ellipse avoid the box's class."""
    ellipse = EllipseRegion.inscribed(b)
    atoms = [
        Not(ClassAtom(i, j, b.target_class))
        for i, j in b.pixels()
        if ellipse.strictly_outside(i, j)
    ]
    return And(atoms, label="corners")


def conjoin(constraints) -> Formula:
    constraints = list(constraints)
    if not constraints:
        raise ValueError("conjoin needs at least one constraint")
    return And(constraints)


# ---------------------------------------------------------------------------
# JSON schema

def to_json_dict(f: Formula) -> dict:
    d: dict = {"op": f.op}
    if f.label is not None:
        d["label"] = f.label
    if f.op == "class_atom":
        d.update(i=f.i, j=f.j, c=f.c)
    elif f.op == "eq_atom":
        d.update(i=f.i, j=f.j, i2=f.i2, j2=f.j2)
    else:
        d["children"] = [to_json_dict(ch) for ch in f.children]
    return d


def from_json_dict(d: dict) -> Formula:
    op = d.get("op")
    label = d.get("label")
    if op == "class_atom":
        f = ClassAtom(d["i"], d["j"], d["c"])
    elif op == "eq_atom":
        f = Formula("eq_atom", i=int(d["i"]), j=int(d["j"]), i2=int(d["i2"]), j2=int(d["j2"]))
    elif op in ("and", "or", "not", "implies"):
        f = Formula(op, children=tuple(from_json_dict(ch) for ch in d.get("children", ())))
    else:
        raise ValueError(f"unknown op {op!r}")
    f.label = label
    return f


def formula_to_json(f: Formula) -> str:
    return json.dumps(to_json_dict(f), separators=(",", ":"))


def formula_from_json(text: str) -> Formula:
    return from_json_dict(json.loads(text))


def save_formula(path, f: Formula) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(formula_to_json(f))
        fh.write("\n")


def load_formula(path) -> Formula:
    with open(path, "r", encoding="utf-8") as fh:
        return formula_from_json(fh.read())
