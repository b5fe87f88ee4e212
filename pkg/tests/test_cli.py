import json
from pathlib import Path

import numpy as np
import pytest

from refdet.cli import main

ROOT = Path(__file__).resolve().parents[1]
SMOKE = str(ROOT / "configs" / "smoke.yaml")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """The whole command chain on the 200-image smoke config."""
    d = tmp_path_factory.mktemp("smoke")
    steps = [
        ["gen-data", "--config", SMOKE, "--out", str(d / "data")],
        ["gen-pseudo", "--config", SMOKE, "--data", str(d / "data"), "--out", str(d / "pseudo.json")],
        ["embed", "--data", str(d / "data"), "--pseudo", str(d / "pseudo.json"), "--out", str(d / "cache.rfcd")],
        ["train", "--config", SMOKE, "--pseudo", str(d / "pseudo.json"), "--cache", str(d / "cache.rfcd"),
         "--out", str(d / "ckpt"), "--iterations", "30"],
        ["self-train", "--ckpt", str(d / "ckpt" / "model.zip"), "--data", str(d / "data"),
         "--out", str(d / "pseudo2.json")],
        ["eval", "--ckpt", str(d / "ckpt" / "model.zip"), "--data", str(d / "data"),
         "--refs", str(d / "data" / "refs" / "sets.json"), "--out", str(d / "report.json"),
         "--csv", str(d / "report.csv")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return d


def test_pipeline_artifacts(pipeline):
    d = pipeline
    manifest = json.loads((d / "data" / "train" / "manifest.json").read_text())
    assert len(manifest["images"]) == 200
    pseudo = json.loads((d / "pseudo.json").read_text())
    assert pseudo["annotations"] and all("category_id" not in a for a in pseudo["annotations"])
    log = [json.loads(line) for line in (d / "ckpt" / "loss_log.jsonl").read_text().splitlines()]
    assert log[-1]["iteration"] == 30
    report = json.loads((d / "report.json").read_text())
    assert set(report["sets"]) == {"0", "1", "2", "3"}
    for k in ("AP", "AP50", "AR"):
        assert report["mean"][k] == pytest.approx(np.mean([v[k] for v in report["sets"].values()]))
    refined = json.loads((d / "pseudo2.json").read_text())
    assert all(a["score"] > 0.9 for a in refined["annotations"])


def test_infer_modes(pipeline, capsys):
    d = pipeline
    image = sorted((d / "data" / "test" / "images").glob("*.png"))[0]
    ckpt = str(d / "ckpt" / "model.zip")
    assert main(["infer", "--ckpt", ckpt, "--image", str(image), "--score-threshold", "0"]) == 0
    preds = json.loads(capsys.readouterr().out)
    assert preds and all(p["ref_id"] == -1 for p in preds)
    crop = sorted((d / "data" / "refs" / "crops").glob("*.png"))[0]
    out = d / "aware.json"
    assert main(["infer", "--ckpt", ckpt, "--image", str(image), "--reference", str(crop),
                 "--score-threshold", "0", "--sim-threshold", "0", "--out", str(out)]) == 0
    preds = json.loads(out.read_text())
    assert preds and all(p["ref_id"] == 0 for p in preds)


def test_track_command(pipeline, capsys):
    d = pipeline
    assert main(["gen-video", "--out", str(d / "video"), "--frames", "5"]) == 0
    box = capsys.readouterr().out.strip()
    assert main(["track", "--ckpt", str(d / "ckpt" / "model.zip"), "--frames", str(d / "video"),
                 "--box", box]) == 0
    track = json.loads(capsys.readouterr().out)
    assert len(track) == 5 and track[0]["score"] == 1.0


def tiny_config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text("data:\n  num_mosaics: 6\n  num_test_mosaics: 2\n  num_reference_sets: 1\n")
    return str(p)


def test_seed_reproduces_bytes(tmp_path):
    cfg = tiny_config(tmp_path)
    for run in ("a", "b"):
        assert main(["gen-data", "--config", cfg, "--seed", "7", "--out", str(tmp_path / run)]) == 0
        assert main(["gen-pseudo", "--config", cfg, "--data", str(tmp_path / run),
                     "--out", str(tmp_path / run / "pseudo.json")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 10
    for rel in files:
        a, b = (tmp_path / "a" / rel).read_bytes(), (tmp_path / "b" / rel).read_bytes()
        if rel.name == "pseudo.json":  # records its own absolute data path
            a, b = (json.loads(x) for x in (a, b))
            a["info"].pop("data"), b["info"].pop("data")
        assert a == b, rel


def test_weak_pseudo_boxes(tmp_path):
    cfg = tiny_config(tmp_path)
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")])
    assert main(["gen-pseudo", "--data", str(tmp_path / "d"), "--weak", "--out", str(tmp_path / "w.json")]) == 0
    gt = json.loads((tmp_path / "d" / "train" / "manifest.json").read_text())
    weak = json.loads((tmp_path / "w.json").read_text())
    assert [a["bbox"] for a in weak["annotations"]] == [a["bbox"] for a in gt["annotations"]]


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["infer", "--ckpt", str(tmp_path / "missing.zip"), "--image", "x.png"]) == 1
    assert "missing.zip" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code != 0
    assert main(["gen-data", "--out", str(tmp_path), "--set", "loss.nope=1"]) == 1
