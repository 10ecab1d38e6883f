"""SLIC superpixels, written for determinism rather than speed.

Centers start on a regular grid, assignment searches a 2S x 2S window per
center in (color, position) space with the spatial term weighted by
compactness / grid-step, and a final connectivity pass merges stray
fragments into their most common 4-neighbor so every superpixel is one
4-connected region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .formulas import SuperpixelMap, relabel_contiguous
from .grids import read_pft, write_pft

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class SlicConfig:
    k: int
    compactness: float = 10.0
    max_iters: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.compactness <= 0:
            raise ValueError(f"compactness must be > 0, got {self.compactness}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


def default_k(h: int, w: int, per_4096: int = 200) -> int:
    """Superpixel count scaled by area from 200 per 64x64."""
    return max(1, round(per_4096 * (h * w) / 4096))


def slic(image: np.ndarray, cfg: SlicConfig) -> SuperpixelMap:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"image must be H x W or H x W x C, got shape {img.shape}")
    h, w, _ = img.shape
    n = h * w
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds pixel count {n}")

    step = math.sqrt(n / cfg.k)
    # balanced grid of roughly k centers, symmetric on the pixel lattice
    n_cols = min(w, cfg.k, max(1, math.ceil(math.sqrt(cfg.k * w / h))))
    n_rows = min(h, max(1, math.ceil(cfg.k / n_cols)))
    cy = (np.arange(n_rows) + 0.5) * h / n_rows - 0.5
    cx = (np.arange(n_cols) + 0.5) * w / n_cols - 0.5
    centers_pos = np.array([(y, x) for y in cy for x in cx])
    centers_col = img[
        np.clip(np.round(centers_pos[:, 0]).astype(int), 0, h - 1),
        np.clip(np.round(centers_pos[:, 1]).astype(int), 0, w - 1),
    ]
    lam2 = (cfg.compactness / step) ** 2
    # window big enough that every pixel is seen by its own tile's center
    radius = int(max(step, h / n_rows, w / n_cols)) + 2

    ii, jj = np.mgrid[0:h, 0:w]
    assign = np.zeros((h, w), dtype=np.int64)
    best = np.full((h, w), np.inf)

    for _ in range(cfg.max_iters):
        best.fill(np.inf)
        for kk in range(len(centers_pos)):
            y, x = centers_pos[kk]
            i0, i1 = max(0, int(y - radius)), min(h, int(y + radius) + 1)
            j0, j1 = max(0, int(x - radius)), min(w, int(x + radius) + 1)
            if i0 >= i1 or j0 >= j1:
                continue
            patch = img[i0:i1, j0:j1]
            d_col = ((patch - centers_col[kk]) ** 2).sum(axis=2)
            d_pos = (ii[i0:i1, j0:j1] - y) ** 2 + (jj[i0:i1, j0:j1] - x) ** 2
            dist = d_col + lam2 * d_pos
            closer = dist < best[i0:i1, j0:j1]
            best[i0:i1, j0:j1][closer] = dist[closer]
            assign[i0:i1, j0:j1][closer] = kk
        for kk in range(len(centers_pos)):
            mask = assign == kk
            if not mask.any():
                continue
            centers_pos[kk] = (ii[mask].mean(), jj[mask].mean())
            centers_col[kk] = img[mask].mean(axis=0)

    return SuperpixelMap(relabel_contiguous(_enforce_connectivity(assign)))


def _enforce_connectivity(assign: np.ndarray) -> np.ndarray:
    """Merge every fragment except its label's largest into a 4-neighbor."""
    out = assign.copy()
    for _ in range(64):
        changed = False
        for lab in np.unique(out):
            mask = out == lab
            comps, n_comps = ndimage.label(mask, structure=_FOUR)
            if n_comps <= 1:
                continue
            sizes = ndimage.sum_labels(np.ones_like(comps), comps, index=range(1, n_comps + 1))
            keep = int(np.argmax(sizes)) + 1
            for comp in range(1, n_comps + 1):
                if comp == keep:
                    continue
                frag = comps == comp
                ring = ndimage.binary_dilation(frag, structure=_FOUR) & ~frag
                # ring pixels always carry other labels: same-label ring
                # pixels would belong to this component already
                vals, counts = np.unique(out[ring], return_counts=True)
                out[frag] = int(vals[np.argmax(counts)])
                changed = True
        if not changed:
            return out
    raise RuntimeError("connectivity pass failed to converge")


def save_superpixels(path, sp: SuperpixelMap) -> None:
    write_pft(path, sp.labels.astype(np.float64))


def load_superpixels(path, h: int, w: int) -> SuperpixelMap:
    arr = read_pft(path)
    if arr.shape != (h, w, 1):
        raise ValueError(f"superpixel map {path} has shape {arr.shape[:2]}, expected {(h, w)}")
    flat = arr[:, :, 0]
    if not np.array_equal(flat, np.round(flat)):
        raise ValueError(f"superpixel map {path} contains non-integer values")
    return SuperpixelMap(relabel_contiguous(flat.astype(np.int64)))
