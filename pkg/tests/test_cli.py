import csv
import json

import numpy as np

from dpcnet import gradcheck, ops
from dpcnet.cli import main
from dpcnet.io import LabelVolume, read_manifest, read_mvol, write_mvol
from pipeline import run_pipeline, write_config


def test_synth_split_and_determinism(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--count", "5", "--shape", "32", "--seed", "3"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--count", "5", "--shape", "32", "--seed", "3"]) == 0
    entries = read_manifest(tmp_path / "a" / "manifest.json")
    assert [e.split for e in entries] == ["train"] * 4 + ["val"]
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    raw = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert raw[0]["image"] == "case_000_image.mvol"


def test_synth_rejects_small_shape(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--count", "1", "--shape", "16"]) == 2
    assert "32" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 2
    (tmp_path / "bad.json").write_text('{"model": {"levels": 3}, "optimizer": {}}')
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    (tmp_path / "odd.json").write_text('{"data": {"patch_size": [12, 12, 12]}}')
    assert main(["train", "--config", str(tmp_path / "odd.json")]) == 2


def test_train_dry_run(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{}")
    assert main(["train", "--config", str(tmp_path / "c.json"), "--dry-run"]) == 0
    out = capsys.readouterr().out
    counts = dict(line.split() for line in out.strip().splitlines())
    assert 400_000 <= int(counts["spacor"]) + int(counts["semcor"]) <= 700_000


def _labels(tmp_path, name, arr, spacing=(1.0, 1.0, 1.0)):
    write_mvol(tmp_path / name, LabelVolume(arr, spacing))
    return str(tmp_path / name)


def test_evaluate_identical_and_missing_class(tmp_path):
    lab = np.zeros((10, 10, 10), np.uint8)
    lab[2:8, 2:8, 2:8] = 1
    p = _labels(tmp_path, "p.mvol", lab)
    assert main(["evaluate", "--pred", p, "--gt", p, "--csv", str(tmp_path / "r.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert rows[0]["volume_id"] == "p" and rows[0]["dsc"] == "1.0" and rows[0]["assd_mm"] == "0.0"
    assert rows[1]["class"] == "2" and rows[1]["rvd"] == "NA" and rows[1]["hd95_mm"] == "NA"


def test_evaluate_shape_mismatch(tmp_path):
    a = _labels(tmp_path, "a.mvol", np.zeros((4, 4, 4), np.uint8))
    b = _labels(tmp_path, "b.mvol", np.zeros((4, 4, 5), np.uint8))
    assert main(["evaluate", "--pred", a, "--gt", b, "--csv", str(tmp_path / "r.csv")]) == 1


def test_missing_input_is_runtime_error(tmp_path):
    assert main(["evaluate", "--pred", str(tmp_path / "x.mvol"), "--gt", str(tmp_path / "y.mvol"), "--csv", str(tmp_path / "r.csv")]) == 1


def test_gradcheck_ops_pass(capsys):
    assert main(["gradcheck", "--skip-e2e"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == len(gradcheck.op_cases(np.random.default_rng(0)))
    assert all(l.endswith("PASS") for l in lines)


def test_gradcheck_detects_sign_error(monkeypatch, capsys):
    fwd = ops.Sigmoid.backward

    def flipped(self, g):
        return tuple(-x for x in fwd(self, g))

    monkeypatch.setattr(ops.Sigmoid, "backward", flipped)
    assert main(["gradcheck", "--skip-e2e"]) == 1
    captured = capsys.readouterr()
    assert "sigmoid" in captured.err


def test_pipeline_and_predict_contract(tmp_path):
    codes, pred, report = run_pipeline(tmp_path)
    assert codes == [0, 0, 0, 0]
    gt = read_mvol(tmp_path / "data" / "case_001_label.mvol")
    p = read_mvol(pred)
    assert isinstance(p, LabelVolume) and p.shape == gt.shape and p.spacing == gt.spacing
    assert set(np.unique(p.labels)) <= {0, 1, 2}
    rows = list(csv.reader(open(report)))
    assert len(rows) == 3 and rows[1][0] == "pred"
    # predict refuses a label volume as input
    ck = str(tmp_path / "run" / "final.dpck")
    assert main(["predict", "--checkpoint", ck, "--input", str(tmp_path / "data" / "case_001_label.mvol"), "--out", str(tmp_path / "x.mvol")]) == 2
    assert main(["predict", "--checkpoint", ck, "--input", str(tmp_path / "data" / "case_001_image.mvol"), "--out", str(tmp_path / "y.mvol"), "--probs", str(tmp_path / "pr")]) == 0
    probs = [read_mvol(tmp_path / "pr" / f"prob_class{c}.mvol").voxels for c in range(3)]
    assert all(q.shape == gt.shape for q in probs)
    np.testing.assert_allclose(sum(probs), 1.0, atol=1e-4)


def test_train_resume(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "2", "--shape", "32"]) == 0
    cfg = write_config(tmp_path / "c.json", tmp_path / "d" / "manifest.json", epochs=2)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "full")]) == 0
    cfg1 = write_config(tmp_path / "c1.json", tmp_path / "d" / "manifest.json", epochs=1)
    assert main(["train", "--config", str(cfg1), "--out", str(tmp_path / "part")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "part"), "--resume"]) == 0
    assert (tmp_path / "full" / "last.dpck").read_bytes() == (tmp_path / "part" / "last.dpck").read_bytes()
