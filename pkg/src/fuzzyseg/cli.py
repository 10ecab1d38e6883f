"""Command-line entry points wiring the library into reproducible runs."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from multiprocessing import Pool

import numpy as np

from .annotations import (
    AnnotationSet,
    JitterSpec,
    derive_boxes_from_gt,
    jitter_box,
    load_annotations,
    read_image,
    read_mask,
    sample_points_from_gt,
    save_annotations,
    write_mask,
)
from .families import FAMILY_LABELS, assemble_constraints
from .formulas import conjoin
from .fuzzy import eval_fuzzy
from .grids import ProbField, read_pft
from .metrics import (
    AblationSpec,
    ConfusionAccumulator,
    RefineTask,
    run_ablation,
    run_ablation_sweep,
    summarize,
    write_ablation_csv,
    write_metrics_csv,
    write_metrics_json,
)
from .oracle import OracleBudget, exact_prob
from .refine import RefineConfig, extract_mask, init_from_prob, refine
from .seeds import derive_seed
from .superpixels import SlicConfig, load_superpixels, slic


class ConfigError(Exception):
    pass


DEFAULT_FAMILIES = ("scribbles", "bbox", "background", "neighborhood", "fill")


def _load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {path}: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _apply_overrides(cfg: dict, pairs) -> dict:
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return cfg


def _resolve_seed(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("FUZZYSEG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FUZZYSEG_SEED must be an integer, got {env!r}")
    return 0


def _refine_config(cfg: dict, constraint_weights=None) -> RefineConfig:
    r = dict(cfg.get("refine", {}))
    if constraint_weights is not None:
        r.setdefault("constraint_weights", constraint_weights)
    try:
        return RefineConfig(
            steps=int(r.get("steps", 200)),
            learning_rate=float(r.get("learning_rate", 1e-4)),
            adam_beta1=float(r.get("adam_beta1", 0.9)),
            adam_beta2=float(r.get("adam_beta2", 0.999)),
            adam_eps=float(r.get("adam_eps", 1e-8)),
            constraint_weights=r.get("constraint_weights"),
            log_every=int(r.get("log_every", 10)),
            seed=int(r.get("seed", 0)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad refine config: {e}")


def _slic_config(cfg: dict) -> SlicConfig:
    s = cfg.get("slic", {})
    try:
        return SlicConfig(
            k=int(s.get("k", 100)),
            compactness=float(s.get("compactness", 0.1)),
            max_iters=int(s.get("max_iters", 10)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad slic config: {e}")


def _families(cfg: dict) -> tuple:
    fams = tuple(cfg.get("families", DEFAULT_FAMILIES))
    unknown = sorted(set(fams) - set(FAMILY_LABELS))
    if unknown:
        raise ConfigError(f"unknown constraint families: {unknown}")
    return fams


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise ConfigError(f"{where} is missing required key {key!r}")
    return entry[key]


def _load_superpixels_for(entry: dict, cfg: dict, where: str):
    if "superpixels" in entry:
        path = entry["superpixels"]
        if not os.path.exists(path):
            raise ConfigError(f"{where}: superpixel file not found: {path}")
        return load_superpixels(path)
    if "image" in entry:
        path = entry["image"]
        if not os.path.exists(path):
            raise ConfigError(f"{where}: image file not found: {path}")
        return slic(read_image(path), _slic_config(cfg))
    raise ConfigError(
        f"{where}: family 'borders' needs either 'superpixels' or 'image'"
    )


def _build_refine_job(cfg: dict, entry: dict, idx: int):
    where = f"inputs[{idx}]"
    prob_path = _require(entry, "prob", where)
    ann_path = _require(entry, "annotations", where)
    out_mask = _require(entry, "out_mask", where)
    for path in (prob_path, ann_path):
        if not os.path.exists(path):
            raise ConfigError(f"{where}: file not found: {path}")

    data = read_pft(prob_path)
    sums = data.sum(axis=2, keepdims=True)
    if np.any(sums <= 0) or np.abs(sums - 1.0).max() > 0.01:
        raise ConfigError(
            f"{where}: {prob_path} does not hold per-pixel probabilities"
        )
    prob = ProbField(data / sums)  # absorb f32 quantization drift
    h, w, _ = prob.data.shape
    ann = load_annotations(ann_path, h, w)
    fams = _families(cfg)
    sp = _load_superpixels_for(entry, cfg, where) if "borders" in fams else None
    corner_classes = cfg.get("corner_classes")
    try:
        constraints = assemble_constraints(
            ann, h, w, fams, superpixels=sp, corner_classes=corner_classes
        )
    except ValueError as e:
        raise ConfigError(f"{where}: {e}")
    init = init_from_prob(prob, floor=float(cfg.get("init_floor", 1e-6)))
    return {
        "init": init,
        "constraints": constraints,
        "out_mask": out_mask,
        "out_trace": entry.get("out_trace"),
    }


def _run_refine_job(payload):
    job, rcfg = payload
    formula = conjoin(list(job["constraints"].values()))
    final, trace = refine(job["init"], formula, rcfg)
    write_mask(job["out_mask"], extract_mask(final).astype(np.uint8))
    if job["out_trace"]:
        trace.write_jsonl(job["out_trace"])
    return job["out_mask"]


def cmd_refine(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args.set)
    seed = _resolve_seed(cfg, args)
    inputs = cfg.get("inputs")
    if not inputs:
        raise ConfigError("config has no 'inputs'")
    rcfg_base = _refine_config(cfg)
    jobs = []
    for idx, entry in enumerate(inputs):
        rcfg = replace(rcfg_base, seed=derive_seed(seed, "refine", idx))
        jobs.append((_build_refine_job(cfg, entry, idx), rcfg))

    n_jobs = args.jobs or os.cpu_count() or 1
    if n_jobs > 1 and len(jobs) > 1:
        with Pool(n_jobs) as pool:
            outs = pool.map(_run_refine_job, jobs)
    else:
        outs = [_run_refine_job(j) for j in jobs]
    for out in outs:
        print(out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args.set)
    inputs = cfg.get("inputs")
    if not inputs:
        raise ConfigError("config has no 'inputs'")
    num_classes = cfg.get("num_classes")
    if num_classes is None:
        raise ConfigError("config needs 'num_classes'")
    acc = ConfusionAccumulator(int(num_classes))
    for idx, entry in enumerate(inputs):
        where = f"inputs[{idx}]"
        pred_path = _require(entry, "pred", where)
        gt_path = _require(entry, "gt", where)
        for path in (pred_path, gt_path):
            if not os.path.exists(path):
                raise ConfigError(f"{where}: file not found: {path}")
        acc.add(read_mask(pred_path), read_mask(gt_path))
    summary = summarize(acc)
    if cfg.get("out_csv"):
        write_metrics_csv(cfg["out_csv"], summary)
    if cfg.get("out_json"):
        write_metrics_json(cfg["out_json"], summary)
    print(f"mean_iou {summary.mean_iou:.6f} mean_dice {summary.mean_dice:.6f}")
    return 0


def _build_ablation_tasks(cfg: dict) -> list:
    inputs = cfg.get("inputs")
    if not inputs:
        raise ConfigError("config has no 'inputs'")
    tasks = []
    for idx, entry in enumerate(inputs):
        where = f"inputs[{idx}]"
        job = _build_refine_job(cfg, {**entry, "out_mask": "unused"}, idx)
        gt_path = _require(entry, "gt", where)
        if not os.path.exists(gt_path):
            raise ConfigError(f"{where}: file not found: {gt_path}")
        tasks.append(
            RefineTask(
                init=job["init"],
                gt=read_mask(gt_path).astype(np.int64),
                constraints=job["constraints"],
            )
        )
    return tasks


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args.set)
    fams = _families(cfg)
    tasks = _build_ablation_tasks(cfg)
    rcfg = _refine_config(cfg)
    leave_out = cfg.get("leave_out")
    if leave_out is None:
        rows = run_ablation_sweep(fams, tasks, rcfg)
    else:
        try:
            spec = AblationSpec(full_set=fams, leave_out=leave_out)
        except ValueError as e:
            raise ConfigError(str(e))
        rows = run_ablation(spec, tasks, rcfg)
    out_csv = cfg.get("out_csv")
    if out_csv:
        write_ablation_csv(out_csv, rows)
    for row in rows:
        print(
            f"{row['constraints']}: mean_iou {row['mean_iou']:.6f} "
            f"delta {row['delta_mean_iou']:+.6f}"
        )
    return 0


def cmd_gen_weak(args) -> int:
    if not os.path.exists(args.gt):
        raise ConfigError(f"gt mask not found: {args.gt}")
    gt = read_mask(args.gt).astype(np.int64)
    num_classes = int(gt.max()) + 1 if args.num_classes is None else args.num_classes
    if num_classes < 2:
        raise ConfigError("gt mask needs at least 2 classes")
    seed = _resolve_seed({}, args)
    boxes = derive_boxes_from_gt(gt, background_class=args.background_class)
    if args.jitter is not None:
        if not (0 < args.jitter <= 1):
            raise ConfigError(f"--jitter must lie in (0, 1], got {args.jitter}")
        jittered = []
        for k, box in enumerate(boxes):
            spec = JitterSpec(
                target_overlap=args.jitter,
                rng_seed=derive_seed(seed, "jitter", k),
            )
            jittered.append(jitter_box(box, gt, spec).box)
        boxes = jittered
    points = sample_points_from_gt(gt, args.points, derive_seed(seed, "points"))
    class_names = tuple(f"class{i}" for i in range(num_classes))
    ann = AnnotationSet(
        class_names=class_names,
        background_class=args.background_class,
        boxes=tuple(boxes),
        points=tuple(points),
    )
    save_annotations(args.out, ann)
    print(args.out)
    return 0


def cmd_oracle_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(derive_seed(seed, "oracle-check"))
    h = w = min(args.size, 3)
    c = 2
    budget = OracleBudget()
    independent = ("fs", "scribbles", "bbox_shallow", "background")
    worst_independent = 0.0
    print("family fuzzy exact gap")
    for trial in range(args.instances):
        gt = rng.integers(0, c, size=(h, w))
        probs = rng.dirichlet(np.ones(c), size=(h, w))
        field = ProbField(probs)
        ann = AnnotationSet(
            class_names=tuple(f"class{i}" for i in range(c)),
            background_class=0,
            boxes=tuple(derive_boxes_from_gt(gt)),
            points=tuple(sample_points_from_gt(gt, 1, derive_seed(seed, "pts", trial))),
        )
        fams = [f for f in FAMILY_LABELS if f != "borders"]
        constraints = assemble_constraints(ann, h, w, fams, gt=gt)
        for fam, formula in constraints.items():
            fuzzy_p = math.exp(eval_fuzzy(formula, field).log_prob)
            exact_p = exact_prob(formula, field, budget)
            gap = abs(fuzzy_p - exact_p)
            if fam in independent:
                worst_independent = max(worst_independent, gap)
            print(f"{fam} {fuzzy_p:.12f} {exact_p:.12f} {gap:.3e}")
    if worst_independent > 1e-9:
        print(
            f"independent-atom exactness violated: gap {worst_independent:.3e}",
            file=sys.stderr,
        )
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fuzzyseg",
        description="Constraint-guided refinement of soft segmentation fields.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config entry (dotted keys, JSON values)",
        )
        sp.add_argument("--seed", type=int, default=None, help="override run seed")

    sp = sub.add_parser("refine", help="optimize probability fields under constraints")
    add_common(sp)
    sp.add_argument("--jobs", type=int, default=None, help="worker processes")
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    add_common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="leave-one-out constraint ablation")
    add_common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gen-weak", help="derive weak annotations from a gt mask")
    sp.add_argument("--gt", required=True, help="ground-truth mask (PGM)")
    sp.add_argument("--out", required=True, help="output annotation JSON")
    sp.add_argument("--points", type=int, default=3, help="points per class")
    sp.add_argument("--jitter", type=float, default=None, help="target box overlap")
    sp.add_argument("--background-class", type=int, default=0)
    sp.add_argument("--num-classes", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_gen_weak)

    sp = sub.add_parser("oracle-check", help="compare relaxed vs exact probabilities")
    sp.add_argument("--size", type=int, default=3, help="grid side, capped at 3")
    sp.add_argument("--instances", type=int, default=5)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
