"""Exact constraint probabilities by brute-force weighted enumeration.

Only feasible on tiny grids (the state count is C**(H*W)), which is exactly
the role: an independently trustworthy ground truth for the relaxed engine.
States are enumerated as a row-major odometer over class indices, batched
through the vectorized discrete evaluator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formulas import Formula
from .fuzzy import eval_discrete, eval_discrete_batch
from .grids import ProbField

_BLOCK = 1 << 16


@dataclass(frozen=True)
class OracleBudget:
    max_states: int = 2_000_000

    def __post_init__(self) -> None:
        if self.max_states < 1:
            raise ValueError("max_states must be at least 1")


def _state_count(h: int, w: int, c: int, budget: OracleBudget) -> int:
    states = c ** (h * w)
    if states > budget.max_states:
        raise ValueError(
            f"enumeration needs {states} states for a {h}x{w} grid with {c} classes, "
            f"over the budget of {budget.max_states}"
        )
    return states


def exact_prob(formula: Formula, probs: ProbField, budget: OracleBudget = OracleBudget()) -> float:
    """Total probability of satisfying label maps under the per-pixel field."""
    h, w, c = probs.data.shape
    states = _state_count(h, w, c, budget)
    p_flat = probs.data.reshape(h * w, c)
    dims = (c,) * (h * w)
    pix = np.arange(h * w)
    total = 0.0
    for start in range(0, states, _BLOCK):
        idx = np.arange(start, min(start + _BLOCK, states))
        digits = np.stack(np.unravel_index(idx, dims), axis=1)  # (B, h*w)
        ys = digits.reshape(-1, h, w)
        sat = eval_discrete_batch(formula, ys)
        map_prob = p_flat[pix, digits].prod(axis=1)
        total += float(map_prob[sat].sum())
    return total


@dataclass(frozen=True)
class ExactAlphaBeta:
    """Exact reliabilities of a constraint as evidence for one ground truth.

    alpha = p(gt | formula holds), None when the formula is never satisfied;
    beta = p(gt | formula fails), None when the formula always holds.
    """

    alpha: float | None
    beta: float | None
    p_formula: float


def exact_alpha_beta(
    formula: Formula,
    gt: np.ndarray,
    probs: ProbField,
    budget: OracleBudget = OracleBudget(),
) -> ExactAlphaBeta:
    gt = np.asarray(gt, dtype=np.int64)
    h, w, c = probs.data.shape
    if gt.shape != (h, w):
        raise ValueError(f"gt shape {gt.shape} does not match field {h}x{w}")
    p_phi = exact_prob(formula, probs, budget)
    p_gt = float(
        np.prod(probs.data[np.arange(h)[:, None], np.arange(w)[None, :], gt])
    )
    gt_sat = eval_discrete(formula, gt)
    alpha = (p_gt if gt_sat else 0.0) / p_phi if p_phi > 0.0 else None
    beta = (p_gt if not gt_sat else 0.0) / (1.0 - p_phi) if p_phi < 1.0 else None
    return ExactAlphaBeta(alpha=alpha, beta=beta, p_formula=p_phi)
