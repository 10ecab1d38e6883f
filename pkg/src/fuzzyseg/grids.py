"""Dense H x W x C grid tensors, per-pixel softmax, and stable log-space scalars.

All probability math runs in 64-bit floats. Arrays are row-major
(i outer, j middle, c inner), which is also the on-disk PFT layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# Probability floor applied before any log; keeps the semantic loss and its
# gradients finite when a probability underflows to 0.
PROB_EPS = 1e-12
LOG_PROB_EPS = math.log(PROB_EPS)

_LN2 = math.log(2.0)


def _as_field_array(data: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim != 3:
        raise ValueError(f"field data must be H x W x C, got shape {arr.shape}")
    if arr.shape[2] < 2:
        raise ValueError(f"field needs at least 2 classes, got {arr.shape[2]}")
    return arr


@dataclass
class LogitField:
    """Grid of unnormalized class scores; the learnable parameters of refinement."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = _as_field_array(self.data)
        if not np.isfinite(self.data).all():
            i, j, c = _first_nonfinite(self.data)
            raise ValueError(f"non-finite logit at pixel (i={i}, j={j}, c={c})")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def classes(self) -> int:
        return self.data.shape[2]


@dataclass
class ProbField:
    """Per-pixel categorical distributions p(Y_ij | x)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = _as_field_array(self.data)
        if self.data.min() < 0.0 or self.data.max() > 1.0 + 1e-12:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = self.data.sum(axis=2)
        if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-9):
            i, j = np.unravel_index(int(np.abs(sums - 1.0).argmax()), sums.shape)
            raise ValueError(
                f"pixel (i={i}, j={j}) distribution sums to {sums[i, j]!r}, not 1"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def classes(self) -> int:
        return self.data.shape[2]


@dataclass
class GradField:
    """Gradient of the loss w.r.t. every logit; same layout as LogitField."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = _as_field_array(self.data)


def _first_nonfinite(arr: np.ndarray) -> tuple[int, int, int]:
    bad = np.argwhere(~np.isfinite(arr))
    i, j, c = bad[0]
    return int(i), int(j), int(c)


def softmax_field(logits: LogitField) -> ProbField:
    """Per-pixel softmax. Invariant to per-pixel additive shifts of the logits."""
    z = logits.data
    shifted = z - z.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    return ProbField(e / e.sum(axis=2, keepdims=True))


def log1mexp(x: float) -> float:
    """Stable log(1 - exp(x)) for x <= 0.

    Uses the expm1 branch for x > -ln 2 and the log1p branch otherwise;
    x = 0 maps to -inf (the complement of a certain event).
    """
    if x > 0.0:
        raise ValueError(f"log1mexp requires x <= 0, got {x}")
    if x == 0.0:
        return -math.inf
    if x > -_LN2:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def log1mexp_arr(x: np.ndarray) -> np.ndarray:
    """Vectorized log1mexp; inputs must be <= 0, 0 maps to -inf."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    hi = x > -_LN2
    with np.errstate(divide="ignore"):
        out[hi] = np.log(-np.expm1(x[hi]))
    out[~hi] = np.log1p(-np.exp(x[~hi]))
    return out


def clamp_log(p: float, eps: float = PROB_EPS) -> float:
    """log(max(p, eps)) for p in [0, 1]; guards the loss against p = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps out of range: {eps}")
    return math.log(max(p, eps))


# ---------------------------------------------------------------------------
# Pixel Field Tensor (PFT): one JSON header line, then H*W*C little-endian
# float32 values in row-major order.

def write_pft(path, data: np.ndarray) -> None:
    arr = _as_pft_array(data)
    h, w, c = arr.shape
    header = '{"h":%d,"w":%d,"c":%d,"dtype":"f32"}\n' % (h, w, c)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(arr.astype("<f4").tobytes(order="C"))


def read_pft(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline()
        try:
            meta = json.loads(header.decode("utf-8"))
            h, w, c = int(meta["h"]), int(meta["w"]), int(meta["c"])
            dtype = meta["dtype"]
        except (ValueError, KeyError) as exc:
            raise ValueError(f"bad PFT header in {path}: {header!r}") from exc
        if dtype != "f32":
            raise ValueError(f"unsupported PFT dtype {dtype!r} in {path}")
        raw = f.read()
    expected = h * w * c * 4
    if len(raw) != expected:
        raise ValueError(
            f"PFT payload in {path} has {len(raw)} bytes, expected {expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return arr.reshape(h, w, c)


def _as_pft_array(data: np.ndarray) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"PFT data must be H x W x C, got shape {arr.shape}")
    return np.ascontiguousarray(arr)
