import json

import numpy as np
import pytest

from fuzzyseg.annotations import (
    AnnotationSet,
    load_annotations,
    save_annotations,
    write_mask,
)
from fuzzyseg.cli import main
from fuzzyseg.formulas import BoundingBox, Scribble
from fuzzyseg.grids import write_pft


@pytest.fixture
def workdir(tmp_path):
    """A 4x4 2-class instance: probability field, annotations, gt mask."""
    rng = np.random.default_rng(0)
    # eighths survive the f32 round trip exactly
    raw = rng.integers(1, 8, size=(4, 4, 2)).astype(np.float64)
    prob = raw / raw.sum(axis=2, keepdims=True)
    prob = np.round(prob * 8) / 8
    prob[..., 1] = 1.0 - prob[..., 0]
    write_pft(tmp_path / "prob.pft", prob)

    ann = AnnotationSet(
        class_names=("bg", "fg"),
        background_class=0,
        boxes=(BoundingBox(1, 1, 3, 3, target_class=1),),
        scribbles=(Scribble(pixels=((2, 2),), target_class=1),),
    )
    save_annotations(tmp_path / "ann.json", ann)

    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[1:4, 1:4] = 1
    write_mask(tmp_path / "gt.pgm", gt)

    config = {
        "seed": 5,
        "families": ["scribbles", "bbox", "background"],
        "refine": {"steps": 40, "learning_rate": 0.05, "log_every": 20},
        "inputs": [
            {
                "prob": str(tmp_path / "prob.pft"),
                "annotations": str(tmp_path / "ann.json"),
                "out_mask": str(tmp_path / "out.pgm"),
                "out_trace": str(tmp_path / "trace.jsonl"),
            }
        ],
    }
    (tmp_path / "refine.json").write_text(json.dumps(config))
    return tmp_path


def test_refine_success_writes_mask(workdir, capsys):
    rc = main(["refine", "--config", str(workdir / "refine.json")])
    assert rc == 0
    assert (workdir / "out.pgm").exists()
    assert (workdir / "trace.jsonl").exists()
    assert str(workdir / "out.pgm") in capsys.readouterr().out


def test_refine_rerun_byte_identical(workdir):
    cfg = str(workdir / "refine.json")
    assert main(["refine", "--config", cfg]) == 0
    mask1 = (workdir / "out.pgm").read_bytes()
    trace1 = (workdir / "trace.jsonl").read_bytes()
    assert main(["refine", "--config", cfg]) == 0
    assert (workdir / "out.pgm").read_bytes() == mask1
    assert (workdir / "trace.jsonl").read_bytes() == trace1


def test_refine_missing_annotation_exits_2(workdir, capsys):
    cfg = json.loads((workdir / "refine.json").read_text())
    cfg["inputs"][0]["annotations"] = str(workdir / "nope.json")
    (workdir / "bad.json").write_text(json.dumps(cfg))
    rc = main(["refine", "--config", str(workdir / "bad.json")])
    assert rc == 2
    assert "nope.json" in capsys.readouterr().err


def test_refine_missing_config_exits_2(tmp_path, capsys):
    rc = main(["refine", "--config", str(tmp_path / "absent.json")])
    assert rc == 2
    assert "absent.json" in capsys.readouterr().err


def test_refine_unknown_family_exits_2(workdir, capsys):
    rc = main(
        ["refine", "--config", str(workdir / "refine.json"), "--set", 'families=["vortex"]']
    )
    assert rc == 2
    assert "vortex" in capsys.readouterr().err


def test_set_override_changes_behavior(workdir):
    cfg = str(workdir / "refine.json")
    assert main(["refine", "--config", cfg, "--set", "refine.steps=1"]) == 0
    quick = (workdir / "out.pgm").read_bytes()
    assert main(["refine", "--config", cfg]) == 0
    assert (workdir / "out.pgm").read_bytes() != quick


def test_refine_parallel_jobs_match_serial(workdir):
    cfg = json.loads((workdir / "refine.json").read_text())
    entry = cfg["inputs"][0]
    second = dict(entry)
    second["out_mask"] = str(workdir / "out2.pgm")
    second["out_trace"] = str(workdir / "trace2.jsonl")
    cfg["inputs"] = [entry, second]
    path = workdir / "two.json"
    path.write_text(json.dumps(cfg))

    assert main(["refine", "--config", str(path), "--jobs", "1"]) == 0
    serial = [(workdir / "out.pgm").read_bytes(), (workdir / "out2.pgm").read_bytes()]
    assert main(["refine", "--config", str(path), "--jobs", "2"]) == 0
    parallel = [(workdir / "out.pgm").read_bytes(), (workdir / "out2.pgm").read_bytes()]
    assert serial == parallel


def test_evaluate_scores_masks(workdir, capsys):
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[1:4, 1:4] = 1
    write_mask(workdir / "pred.pgm", pred)
    config = {
        "num_classes": 2,
        "inputs": [{"pred": str(workdir / "pred.pgm"), "gt": str(workdir / "gt.pgm")}],
        "out_csv": str(workdir / "metrics.csv"),
        "out_json": str(workdir / "metrics.json"),
    }
    (workdir / "eval.json").write_text(json.dumps(config))
    rc = main(["evaluate", "--config", str(workdir / "eval.json")])
    assert rc == 0
    assert "mean_iou 1.000000" in capsys.readouterr().out
    assert json.loads((workdir / "metrics.json").read_text())["mean_iou"] == 1.0
    assert (workdir / "metrics.csv").read_text().startswith("class,iou,dice")


def test_evaluate_missing_pred_exits_2(workdir, capsys):
    config = {
        "num_classes": 2,
        "inputs": [{"pred": str(workdir / "ghost.pgm"), "gt": str(workdir / "gt.pgm")}],
    }
    (workdir / "eval.json").write_text(json.dumps(config))
    assert main(["evaluate", "--config", str(workdir / "eval.json")]) == 2
    assert "ghost.pgm" in capsys.readouterr().err


def test_ablate_writes_table(workdir, capsys):
    config = json.loads((workdir / "refine.json").read_text())
    config["inputs"][0]["gt"] = str(workdir / "gt.pgm")
    config["leave_out"] = "scribbles"
    config["out_csv"] = str(workdir / "ablation.csv")
    (workdir / "ablate.json").write_text(json.dumps(config))
    rc = main(["ablate", "--config", str(workdir / "ablate.json")])
    assert rc == 0
    lines = (workdir / "ablation.csv").read_text().strip().split("\n")
    assert lines[0] == "constraints,mean_iou,delta_mean_iou"
    assert len(lines) == 3
    assert "full \\ scribbles" in lines[2]


def test_gen_weak_round_trip(workdir):
    out = workdir / "weak.json"
    rc = main(
        ["gen-weak", "--gt", str(workdir / "gt.pgm"), "--out", str(out), "--points", "2", "--seed", "3"]
    )
    assert rc == 0
    ann = load_annotations(out, 4, 4)
    assert len(ann.boxes) == 1
    assert ann.boxes[0].target_class == 1
    assert (ann.boxes[0].i1, ann.boxes[0].j1) == (1, 1)
    assert len(ann.points) == 4  # 2 per class, 2 classes
    gt = np.zeros((4, 4), dtype=np.int64)
    gt[1:4, 1:4] = 1
    for i, j, c in ann.points:
        assert gt[i, j] == c


def test_gen_weak_deterministic_per_seed(workdir):
    a, b, c = (workdir / n for n in ("wa.json", "wb.json", "wc.json"))
    base = ["gen-weak", "--gt", str(workdir / "gt.pgm"), "--points", "2"]
    assert main(base + ["--out", str(a), "--seed", "3"]) == 0
    assert main(base + ["--out", str(b), "--seed", "3"]) == 0
    assert main(base + ["--out", str(c), "--seed", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_gen_weak_env_seed_fallback(workdir, monkeypatch):
    a, b = workdir / "ea.json", workdir / "eb.json"
    base = ["gen-weak", "--gt", str(workdir / "gt.pgm"), "--points", "2"]
    monkeypatch.setenv("FUZZYSEG_SEED", "11")
    assert main(base + ["--out", str(a)]) == 0
    monkeypatch.setenv("FUZZYSEG_SEED", "12")
    assert main(base + ["--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_gen_weak_jitter_flag(workdir):
    out = workdir / "jit.json"
    rc = main(
        [
            "gen-weak", "--gt", str(workdir / "gt.pgm"), "--out", str(out),
            "--jitter", "0.9", "--seed", "3",
        ]
    )
    assert rc == 0
    ann = load_annotations(out)
    assert len(ann.boxes) == 1


def test_gen_weak_missing_gt_exits_2(tmp_path, capsys):
    rc = main(["gen-weak", "--gt", str(tmp_path / "no.pgm"), "--out", str(tmp_path / "o.json")])
    assert rc == 2
    assert "no.pgm" in capsys.readouterr().err


def test_oracle_check_passes(capsys):
    rc = main(["oracle-check", "--instances", "2", "--seed", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "family fuzzy exact gap" in out
    assert "fs" in out


def test_help_and_unknown_flags():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        main(["refine", "--config", "x", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
