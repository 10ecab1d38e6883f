"""Gradient refinement of logit fields under soft constraint losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .formulas import Formula
from .fuzzy import eval_discrete, semantic_loss_and_grad
from .grids import LogitField, ProbField


@dataclass(frozen=True)
class RefineConfig:
    steps: int
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    constraint_weights: Optional[dict] = None
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")
        if self.constraint_weights is not None:
            for k, v in self.constraint_weights.items():
                if v < 0 or not math.isfinite(v):
                    raise ValueError(f"constraint weight for {k!r} must be >= 0, got {v}")


@dataclass
class RefineTrace:
    """Losses for every step plus richer records at logged steps."""

    losses: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class RefineDiverged(RuntimeError):
    """Loss went non-finite; carries the 1-based step where it happened."""

    def __init__(self, step: int, loss: float, per_constraint: dict):
        self.step = step
        self.loss = loss
        self.per_constraint = per_constraint
        bad = sorted(k for k, v in per_constraint.items() if not math.isfinite(v))
        super().__init__(
            f"non-finite loss {loss} at step {step}"
            + (f" (families: {bad})" if bad else "")
        )


def constraint_parts(formula: Formula) -> list:
    """Split a plain conjunction of labeled families into its parts.

    Anything else is treated as a single constraint so the loss stays
    exactly the sum of part losses.
    """
    if (
        formula.op == "and"
        and formula.label is None
        and formula.children
        and all(c.label is not None for c in formula.children)
    ):
        return list(formula.children)
    return [formula]


def extract_mask(logits: LogitField) -> np.ndarray:
    """Per-pixel argmax; ties break toward the lowest class index."""
    return np.argmax(logits.data, axis=2).astype(np.int64)


def init_from_prob(prob: ProbField, floor: float = 1e-6) -> LogitField:
    """Logits = log(max(p, floor)). The floor keeps zeros differentiable."""
    if not (0 < floor <= 0.1):
        raise ValueError(f"floor must lie in (0, 0.1], got {floor}")
    return LogitField(np.log(np.maximum(prob.data, floor)))


def _key(label) -> str:
    return label if label is not None else "constraint"


def refine(init: LogitField, formula: Formula, cfg: RefineConfig):
    """Run cfg.steps Adam updates on a copy of init against the loss.

    Returns (final LogitField, RefineTrace). Deterministic for fixed
    inputs and config. Raises RefineDiverged if the loss leaves the
    finite range at any step.
    """
    parts = constraint_parts(formula)
    weights = cfg.constraint_weights
    z = init.data.copy()
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    trace = RefineTrace()

    def snapshot(step: int) -> dict:
        cur = LogitField(z)
        total, per_c, _ = semantic_loss_and_grad(parts, cur, weights)
        mask = extract_mask(cur)
        sat = {_key(p.label): bool(eval_discrete(p, mask)) for p in parts}
        return {
            "step": step,
            "loss": float(total),
            "per_constraint": {_key(k): float(x) for k, x in per_c.items()},
            "satisfaction": sat,
        }

    for step in range(1, cfg.steps + 1):
        # probability floors keep losses finite, so divergence surfaces as
        # logits overflowing during the update; catch both forms here
        if not np.all(np.isfinite(z)):
            raise RefineDiverged(step, math.nan, {})
        total, per_c, grad = semantic_loss_and_grad(parts, LogitField(z), weights)
        if not math.isfinite(total):
            raise RefineDiverged(step, float(total), {_key(k): float(x) for k, x in per_c.items()})
        trace.losses.append(float(total))

        g = grad.data
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
        m_hat = m / (1 - cfg.adam_beta1**step)
        v_hat = v / (1 - cfg.adam_beta2**step)
        z = z - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.records.append(snapshot(step))

    return LogitField(z), trace
