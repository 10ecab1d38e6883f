"""Handle-based loss/gradient surface over the constraint engine.

compile() turns annotation JSON plus grid dims into an opaque engine handle
holding one conjoined formula. loss_and_grad() moves flat float64 buffers
across the boundary, so a caller can wrap the pair as a custom gradient op
in whatever framework drives the training loop. release() invalidates the
handle; everything else about an engine is immutable, which makes concurrent
loss_and_grad calls on one engine safe.
"""

from __future__ import annotations

import os
import tempfile
import threading
from dataclasses import dataclass

import numpy as np

from fuzzyseg.annotations import load_annotations
from fuzzyseg.families import assemble_constraints
from fuzzyseg.formulas import conjoin
from fuzzyseg.fuzzy import semantic_loss_and_grad
from fuzzyseg.grids import LogitField

# families an engine can build from annotations alone; the others need a
# dense mask or a superpixel map, which never cross this boundary
COMPILABLE_FAMILIES = (
    "scribbles",
    "bbox_shallow",
    "bbox",
    "background",
    "neighborhood",
    "fill",
    "corners",
)

_lock = threading.Lock()
_registry: dict[int, object] = {}
_next_handle = 1


@dataclass(frozen=True)
class BoundEngine:
    handle: int
    height: int
    width: int
    classes: int

    @property
    def buffer_size(self) -> int:
        return self.height * self.width * self.classes


def compile(annotation_json: str, h: int, w: int, c: int, constraint_flags) -> BoundEngine:
    """Build one conjoined formula over an h x w x c grid.

    constraint_flags picks the constraint families, by label, from
    COMPILABLE_FAMILIES. Annotation class count must match c.
    """
    global _next_handle
    if h < 1 or w < 1:
        raise ValueError(f"grid dims must be positive, got h={h}, w={w}")
    if c < 2:
        raise ValueError(f"need at least 2 classes, got c={c}")
    flags = tuple(constraint_flags)
    if not flags:
        raise ValueError("constraint_flags must name at least one family")
    for flag in flags:
        if flag not in COMPILABLE_FAMILIES:
            raise ValueError(
                f"family {flag!r} is not available here; choose from "
                f"{COMPILABLE_FAMILIES}"
            )

    tmp = tempfile.NamedTemporaryFile(
        mode="w", suffix=".json", delete=False, encoding="utf-8"
    )
    try:
        tmp.write(annotation_json)
        tmp.close()
        ann = load_annotations(tmp.name, h, w)
    finally:
        tmp.close()
        os.unlink(tmp.name)
    if ann.num_classes != c:
        raise ValueError(
            f"annotations declare {ann.num_classes} classes, engine expects {c}"
        )

    families = assemble_constraints(ann, h, w, flags)
    formula = conjoin([families[f] for f in flags])
    with _lock:
        handle = _next_handle
        _next_handle += 1
        _registry[handle] = formula
    return BoundEngine(handle=handle, height=h, width=w, classes=c)


def loss_and_grad(engine: BoundEngine, logits):
    """Loss and gradient for a flat (h*w*c)-length float buffer.

    Layout is row-major (i outer, j middle, c inner), matching the grid
    field layout. Returns (loss, flat float64 gradient).
    """
    with _lock:
        formula = _registry.get(engine.handle)
    if formula is None:
        raise ValueError(f"engine handle {engine.handle} is released or unknown")
    buf = np.asarray(logits, dtype=np.float64)
    if buf.ndim != 1:
        raise ValueError(f"logit buffer must be flat, got shape {buf.shape}")
    if buf.size != engine.buffer_size:
        raise ValueError(
            f"logit buffer has {buf.size} values, expected {engine.buffer_size} "
            f"(h={engine.height}, w={engine.width}, c={engine.classes})"
        )
    field = LogitField(buf.reshape(engine.height, engine.width, engine.classes))
    loss, _, grad = semantic_loss_and_grad([formula], field)
    return float(loss), np.ascontiguousarray(grad.data.reshape(-1))


def release(engine: BoundEngine) -> None:
    """Invalidate the handle; later loss_and_grad calls on it raise."""
    with _lock:
        if _registry.pop(engine.handle, None) is None:
            raise ValueError(
                f"engine handle {engine.handle} is released or unknown"
            )
