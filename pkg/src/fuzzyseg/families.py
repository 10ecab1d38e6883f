"""Assembly of labeled constraint families from annotations.

Each family becomes one labeled formula so that losses, weights, and
satisfaction reports stay attributable per family downstream.
"""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .annotations import AnnotationSet
from .formulas import (
    And,
    Formula,
    SuperpixelMap,
    build_background,
    build_bbox_shallow,
    build_bbox_tight,
    build_borders,
    build_corners,
    build_fill,
    build_full_supervision,
    build_neighborhood,
    build_scribble,
)

FAMILY_LABELS = (
    "fs",
    "scribbles",
    "bbox_shallow",
    "bbox",
    "background",
    "neighborhood",
    "fill",
    "borders",
    "corners",
)


def assemble_constraints(
    ann: AnnotationSet,
    h: int,
    w: int,
    families: Iterable[str],
    superpixels: Optional[SuperpixelMap] = None,
    gt: Optional[np.ndarray] = None,
    corner_classes: Optional[Iterable[int]] = None,
) -> dict[str, Formula]:
    """Build one labeled formula per requested family.

    "borders" requires superpixels, "fs" requires gt. The corner prior
    only suits roughly elliptical objects, so corner_classes restricts
    which box classes receive it (default: all). Boxes thinner than 2x2
    contribute nothing to "corners" since no ellipse fits inside them.
    """
    requested = list(families)
    unknown = sorted(set(requested) - set(FAMILY_LABELS))
    if unknown:
        raise ValueError(f"unknown constraint families: {unknown}")
    ann.validate_bounds(h, w)

    out: dict[str, Formula] = {}
    for fam in FAMILY_LABELS:
        if fam not in requested:
            continue
        if fam == "fs":
            if gt is None:
                raise ValueError("family 'fs' requires a ground-truth mask")
            out[fam] = build_full_supervision(gt, ann.num_classes)
        elif fam == "scribbles":
            parts = [build_scribble(s) for s in ann.all_scribbles()]
            out[fam] = And(parts, label="scribbles")
        elif fam == "bbox_shallow":
            parts = [build_bbox_shallow(b) for b in ann.boxes]
            out[fam] = And(parts, label="bbox_shallow")
        elif fam == "bbox":
            parts = [build_bbox_tight(b) for b in ann.boxes]
            out[fam] = And(parts, label="bbox")
        elif fam == "background":
            out[fam] = build_background(h, w, ann.boxes, ann.background_class)
        elif fam == "neighborhood":
            out[fam] = build_neighborhood(h, w)
        elif fam == "fill":
            out[fam] = build_fill(h, w)
        elif fam == "borders":
            if superpixels is None:
                raise ValueError("family 'borders' requires a superpixel map")
            if superpixels.labels.shape != (h, w):
                raise ValueError(
                    f"superpixel map shape {superpixels.labels.shape} "
                    f"does not match ({h}, {w})"
                )
            out[fam] = build_borders(superpixels)
        elif fam == "corners":
            allowed = None if corner_classes is None else set(corner_classes)
            parts = [
                build_corners(b)
                for b in ann.boxes
                if b.height >= 2
                and b.width >= 2
                and (allowed is None or b.target_class in allowed)
            ]
            out[fam] = And(parts, label="corners")
    return out
