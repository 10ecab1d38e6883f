"""Synthetic scenes for exercising the refinement loop end to end.

Each scene holds a filled rectangle and an ellipse on background. The
ellipse is generated from an integer center and integer radii with odd
box sides, so the tight box derived from the mask reproduces the
generating box and the mask is exactly the box's inscribed-ellipse
pixel set. That makes the corner-exclusion constraint true on the
clean mask by construction rather than by luck.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import AnnotationSet, derive_boxes_from_gt, sample_points_from_gt
from .families import assemble_constraints
from .formulas import Formula, SuperpixelMap
from .fuzzy import eval_discrete
from .grids import LogitField, ProbField
from .refine import init_from_prob
from .seeds import derive_seed
from .superpixels import SlicConfig, slic

HARNESS_FAMILIES = (
    "scribbles",
    "bbox",
    "background",
    "neighborhood",
    "fill",
    "borders",
    "corners",
)

CLASS_NAMES = ("background", "slab", "blob")
RECT_CLASS = 1
ELLIPSE_CLASS = 2


@dataclass(frozen=True)
class HarnessConfig:
    n_images: int = 100
    h: int = 64
    w: int = 64
    flip_prob: float = 0.3
    init_confidence: float = 0.6
    points_per_class: int = 3
    slic_k: int = 100
    slic_compactness: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if self.h < 32 or self.w < 32:
            raise ValueError("scenes need at least 32x32 to place both objects")
        if not (0 <= self.flip_prob < 1):
            raise ValueError(f"flip_prob must lie in [0, 1), got {self.flip_prob}")
        if not (1.0 / 3 < self.init_confidence < 1):
            raise ValueError("init_confidence must exceed chance for 3 classes")


@dataclass(frozen=True)
class SynthTask:
    """One scene: clean mask, rendered image, weak labels, noisy init."""

    gt: np.ndarray
    image: np.ndarray
    ann: AnnotationSet
    superpixels: SuperpixelMap
    init: LogitField
    constraints: dict

    @property
    def num_classes(self) -> int:
        return self.ann.num_classes


def _boxes_overlap(a, b) -> bool:
    (ai1, ai2, aj1, aj2), (bi1, bi2, bj1, bj2) = a, b
    return ai1 <= bi2 and bi1 <= ai2 and aj1 <= bj2 and bj1 <= aj2


def _place_objects(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    gt = np.zeros((h, w), dtype=np.int64)
    for _ in range(200):
        rh = int(rng.integers(10, 17))
        rw = int(rng.integers(10, 17))
        ri = int(rng.integers(1, h - rh))
        rj = int(rng.integers(1, w - rw))

        ry = int(rng.integers(4, 8))
        rx = int(rng.integers(4, 8))
        cy = int(rng.integers(1 + ry, h - 1 - ry))
        cx = int(rng.integers(1 + rx, w - 1 - rx))

        rect = (ri - 2, ri + rh + 1, rj - 2, rj + rw + 1)  # 2-pixel moat
        ell = (cy - ry, cy + ry, cx - rx, cx + rx)
        if _boxes_overlap(rect, ell):
            continue
        gt[ri : ri + rh, rj : rj + rw] = RECT_CLASS
        ii, jj = np.mgrid[0:h, 0:w]
        inside = ((ii - cy) / ry) ** 2 + ((jj - cx) / rx) ** 2 <= 1.0
        gt[inside] = ELLIPSE_CLASS
        return gt
    raise RuntimeError("could not place disjoint objects in 200 draws")


def _flip_labels(rng: np.random.Generator, gt: np.ndarray, flip_prob: float, c: int) -> np.ndarray:
    flips = rng.random(gt.shape) < flip_prob
    offset = rng.integers(1, c, size=gt.shape)
    return np.where(flips, (gt + offset) % c, gt).astype(np.int64)


def _render(rng: np.random.Generator, gt: np.ndarray) -> np.ndarray:
    shade = np.array([0.2, 0.5, 0.8])[gt]
    return np.clip(shade + rng.normal(0.0, 0.05, size=gt.shape), 0.0, 1.0)


def make_task(cfg: HarnessConfig, index: int) -> SynthTask:
    rng = np.random.default_rng(derive_seed(cfg.seed, "scene", index))
    c = len(CLASS_NAMES)
    gt = _place_objects(rng, cfg.h, cfg.w)
    image = _render(rng, gt)
    noisy = _flip_labels(rng, gt, cfg.flip_prob, c)

    conf = cfg.init_confidence
    probs = np.full((cfg.h, cfg.w, c), (1.0 - conf) / (c - 1))
    ii, jj = np.mgrid[0 : cfg.h, 0 : cfg.w]
    probs[ii, jj, noisy] = conf
    init = init_from_prob(ProbField(probs), floor=1e-6)

    ann = AnnotationSet(
        class_names=CLASS_NAMES,
        background_class=0,
        boxes=tuple(derive_boxes_from_gt(gt)),
        points=tuple(
            sample_points_from_gt(
                gt, cfg.points_per_class, derive_seed(cfg.seed, "points", index)
            )
        ),
    )
    sp = slic(image, SlicConfig(k=cfg.slic_k, compactness=cfg.slic_compactness))
    constraints = assemble_constraints(
        ann,
        cfg.h,
        cfg.w,
        HARNESS_FAMILIES,
        superpixels=sp,
        corner_classes={ELLIPSE_CLASS},
    )
    return SynthTask(
        gt=gt, image=image, ann=ann, superpixels=sp, init=init, constraints=constraints
    )


def make_tasks(cfg: HarnessConfig) -> list:
    return [make_task(cfg, i) for i in range(cfg.n_images)]


def satisfaction_rates(tasks, masks) -> dict:
    """Mean discrete satisfaction per family over (task, mask) pairs."""
    if len(tasks) != len(masks):
        raise ValueError(f"{len(tasks)} tasks vs {len(masks)} masks")
    totals: dict = {}
    for task, mask in zip(tasks, masks):
        for fam, formula in task.constraints.items():
            ok = bool(eval_discrete(formula, mask))
            totals.setdefault(fam, []).append(ok)
    return {fam: float(np.mean(flags)) for fam, flags in totals.items()}
