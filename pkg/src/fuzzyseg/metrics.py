"""Segmentation quality metrics and constraint-ablation sweeps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .formulas import Formula, conjoin
from .grids import LogitField
from .refine import RefineConfig, extract_mask, refine


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 2:
        raise ValueError(f"label maps must be 2-d, got shape {pred.shape}")
    return pred, gt


@dataclass
class ConfusionAccumulator:
    """Pooled per-class intersection and area counts over many images.

    Per-class IoU is computed from the pooled counts, so one image
    missing a class does not zero that class out.
    """

    num_classes: int
    intersection: np.ndarray = field(init=False)
    pred_area: np.ndarray = field(init=False)
    gt_area: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        self.pred_area = np.zeros(self.num_classes, dtype=np.int64)
        self.gt_area = np.zeros(self.num_classes, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = _check_pair(pred, gt)
        hi = max(int(pred.max()), int(gt.max()))
        if hi >= self.num_classes:
            raise ValueError(f"label {hi} out of range for {self.num_classes} classes")
        agree = pred == gt
        self.intersection += np.bincount(pred[agree], minlength=self.num_classes)
        self.pred_area += np.bincount(pred.ravel(), minlength=self.num_classes)
        self.gt_area += np.bincount(gt.ravel(), minlength=self.num_classes)

    def merge(self, other: "ConfusionAccumulator") -> None:
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        self.intersection += other.intersection
        self.pred_area += other.pred_area
        self.gt_area += other.gt_area

    def class_iou(self, c: int) -> float:
        union = self.pred_area[c] + self.gt_area[c] - self.intersection[c]
        if union == 0:
            return math.nan
        return float(self.intersection[c] / union)

    def class_dice(self, c: int) -> float:
        denom = self.pred_area[c] + self.gt_area[c]
        if denom == 0:
            return math.nan
        return float(2.0 * self.intersection[c] / denom)


def iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class IoU for one image pair; nan where a class is absent from both."""
    acc = ConfusionAccumulator(num_classes)
    acc.add(pred, gt)
    return np.array([acc.class_iou(c) for c in range(num_classes)])


def dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    acc = ConfusionAccumulator(num_classes)
    acc.add(pred, gt)
    return np.array([acc.class_dice(c) for c in range(num_classes)])


@dataclass(frozen=True)
class MetricsSummary:
    class_iou: tuple
    class_dice: tuple
    mean_iou: float
    mean_dice: float

    def to_dict(self) -> dict:
        return {
            "class_iou": [None if math.isnan(x) else x for x in self.class_iou],
            "class_dice": [None if math.isnan(x) else x for x in self.class_dice],
            "mean_iou": self.mean_iou,
            "mean_dice": self.mean_dice,
        }


def summarize(acc: ConfusionAccumulator) -> MetricsSummary:
    """Means skip classes absent from both predictions and ground truth."""
    ious = [acc.class_iou(c) for c in range(acc.num_classes)]
    dices = [acc.class_dice(c) for c in range(acc.num_classes)]
    seen = [x for x in ious if not math.isnan(x)]
    seen_d = [x for x in dices if not math.isnan(x)]
    return MetricsSummary(
        class_iou=tuple(ious),
        class_dice=tuple(dices),
        mean_iou=float(np.mean(seen)) if seen else math.nan,
        mean_dice=float(np.mean(seen_d)) if seen_d else math.nan,
    )


def mean_over_dataset(pairs: Iterable, num_classes: int) -> MetricsSummary:
    """Pool (pred, gt) pairs into one accumulator and summarize."""
    acc = ConfusionAccumulator(num_classes)
    for pred, gt in pairs:
        acc.add(pred, gt)
    return summarize(acc)


def write_metrics_csv(path, summary: MetricsSummary) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou", "dice"])
        for c, (i, d) in enumerate(zip(summary.class_iou, summary.class_dice)):
            writer.writerow([c, "" if math.isnan(i) else f"{i:.6f}", "" if math.isnan(d) else f"{d:.6f}"])
        writer.writerow(["mean", f"{summary.mean_iou:.6f}", f"{summary.mean_dice:.6f}"])


def write_metrics_json(path, summary: MetricsSummary) -> None:
    with open(path, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class AblationSpec:
    """One row of an ablation: the full family set minus leave_out."""

    full_set: tuple
    leave_out: Optional[str] = None

    def __post_init__(self):
        if not self.full_set:
            raise ValueError("full_set must not be empty")
        if len(set(self.full_set)) != len(self.full_set):
            raise ValueError("full_set has duplicate families")
        if self.leave_out is not None and self.leave_out not in self.full_set:
            raise ValueError(
                f"leave_out {self.leave_out!r} is not in full_set {self.full_set}"
            )

    @property
    def active(self) -> tuple:
        return tuple(f for f in self.full_set if f != self.leave_out)

    @property
    def name(self) -> str:
        return "full" if self.leave_out is None else f"full \\ {self.leave_out}"


@dataclass(frozen=True)
class RefineTask:
    """One image worth of ablation input: init logits, gt, family formulas."""

    init: LogitField
    gt: np.ndarray
    constraints: dict


def _subset_formula(constraints: dict, active: Sequence[str]) -> Formula:
    missing = sorted(set(active) - set(constraints))
    if missing:
        raise ValueError(f"task lacks constraint families: {missing}")
    return conjoin([constraints[f] for f in active])


def _score_subset(active: Sequence[str], tasks: Sequence[RefineTask], cfg: RefineConfig) -> float:
    acc = ConfusionAccumulator(tasks[0].init.classes)
    for task in tasks:
        final, _ = refine(task.init, _subset_formula(task.constraints, active), cfg)
        acc.add(extract_mask(final), task.gt)
    return summarize(acc).mean_iou


def run_ablation(spec: AblationSpec, tasks: Sequence[RefineTask], cfg: RefineConfig) -> list:
    """Refine every task under the full set and, if requested, without one
    family; rows carry mIoU deltas against the full set."""
    if not tasks:
        raise ValueError("no tasks given")
    full_miou = _score_subset(spec.full_set, tasks, cfg)
    rows = [{"constraints": "full", "mean_iou": full_miou, "delta_mean_iou": 0.0}]
    if spec.leave_out is not None:
        miou = _score_subset(spec.active, tasks, cfg)
        rows.append(
            {
                "constraints": spec.name,
                "mean_iou": miou,
                "delta_mean_iou": miou - full_miou,
            }
        )
    return rows


def run_ablation_sweep(full_set: Sequence[str], tasks: Sequence[RefineTask], cfg: RefineConfig) -> list:
    """Full baseline plus one row per left-out family, baseline run once."""
    if not tasks:
        raise ValueError("no tasks given")
    base = AblationSpec(full_set=tuple(full_set))
    full_miou = _score_subset(base.full_set, tasks, cfg)
    rows = [{"constraints": "full", "mean_iou": full_miou, "delta_mean_iou": 0.0}]
    for fam in base.full_set:
        spec = AblationSpec(full_set=base.full_set, leave_out=fam)
        miou = _score_subset(spec.active, tasks, cfg)
        rows.append(
            {
                "constraints": spec.name,
                "mean_iou": miou,
                "delta_mean_iou": miou - full_miou,
            }
        )
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["constraints", "mean_iou", "delta_mean_iou"])
        for row in rows:
            writer.writerow(
                [row["constraints"], f"{row['mean_iou']:.6f}", f"{row['delta_mean_iou']:.6f}"]
            )
