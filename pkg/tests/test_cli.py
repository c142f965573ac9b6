"""End-to-end command-line workflow at toy scale, plus exit-code contract."""

import json
import os

import numpy as np
import pytest

from defnet.cli import main
from defnet.pipeline import BoundingBox, load_detections, save_proposals


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One generated dataset and one trained model, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["gen-data", "--out", str(data), "--seed", "3",
               "--train", "14", "--val", "6"])
    assert rc == 0
    model = root / "model.json"
    rc = main(["train", "--data", str(data), "--out", str(model),
               "--seed", "1", "--epochs", "1"])
    assert rc == 0
    return root, data, model


def test_gen_data_layout(workdir):
    _root, data, _model = workdir
    assert (data / "train.jsonl").exists()
    assert (data / "val.jsonl").exists()
    assert not (data / "test.jsonl").exists()  # --test defaulted to 0
    with open(data / "train.jsonl") as fh:
        header = json.loads(next(fh))
        rows = [json.loads(line) for line in fh]
    assert header["split"] == "train"
    assert len(rows) == 14
    for row in rows:
        assert os.path.exists(data / row["path"])


def test_detect_then_eval(workdir, capsys):
    root, data, model = workdir
    dets = root / "val_dets.jsonl"
    rc = main(["detect", "--model", str(model), "--data", str(data),
               "--split", "val", "--out", str(dets), "--seed", "0"])
    assert rc == 0
    assert load_detections(dets)  # non-empty, well-formed

    report = root / "eval.csv"
    rc = main(["eval", "--detections", str(dets), "--data", str(data),
               "--split", "val", "--out", str(report)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mAP" in out
    assert report.exists()


def test_detect_stage_flags_change_output(workdir):
    root, data, model = workdir
    plain = root / "plain.jsonl"
    no_nms = root / "no_nms.jsonl"
    assert main(["detect", "--model", str(model), "--data", str(data),
                 "--out", str(plain), "--seed", "0"]) == 0
    assert main(["detect", "--model", str(model), "--data", str(data),
                 "--out", str(no_nms), "--seed", "0", "--no-nms"]) == 0
    assert len(load_detections(no_nms)) >= len(load_detections(plain))


def test_train_with_aux_bundle_and_staged_detect(workdir, tmp_path):
    _root, data, _model = workdir
    model = tmp_path / "staged.json"
    aux = tmp_path / "aux.json"
    rc = main(["train", "--data", str(data), "--out", str(model),
               "--seed", "2", "--epochs", "1", "--schedule", "multistage",
               "--aux-out", str(aux), "--aux-images", "8"])
    assert rc == 0
    assert aux.exists()
    dets = tmp_path / "dets.jsonl"
    rc = main(["detect", "--model", str(model), "--data", str(data),
               "--out", str(dets), "--aux", str(aux), "--seed", "0"])
    assert rc == 0


def test_ensemble_command(workdir, tmp_path, capsys):
    _root, data, _model = workdir
    # two synthetic "models" scoring the same proposal set
    with open(data / "val.jsonl") as fh:
        next(fh)  # header
        ids = [json.loads(line)["id"] for line in fh]
    rng = np.random.default_rng(0)
    boxes = {iid: [BoundingBox(2.0, 2.0, 12.0, 12.0),
                   BoundingBox(5.0, 8.0, 20.0, 22.0)] for iid in ids}
    paths = []
    for name in ("alpha", "beta"):
        scored = {iid: [(b, rng.normal(size=4)) for b in boxes[iid]]
                  for iid in ids}
        path = tmp_path / (name + ".jsonl")
        save_proposals(path, scored)
        paths.append(str(path))
    spec_path = tmp_path / "ens.json"
    rc = main(["ensemble", "--scored", *paths, "--data", str(data),
               "--split", "val", "--mode", "per-cls", "--out", str(spec_path)])
    assert rc == 0
    assert "ensemble per-cls mAP" in capsys.readouterr().out
    doc = json.loads(spec_path.read_text())
    assert set(doc["models"]) <= {"alpha", "beta"}


def test_self_check_commands():
    assert main(["grad-check", "--seeds", "2"]) == 0
    assert main(["oracle-check", "--cases", "10"]) == 0


# ---------------------------------------------------------------------------
# exit codes


def test_bad_usage_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["train"])  # required args missing
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 2


def test_missing_file_exits_3(workdir, tmp_path):
    _root, data, _model = workdir
    rc = main(["eval", "--detections", str(tmp_path / "ghost.jsonl"),
               "--data", str(data)])
    assert rc == 3


def test_schema_violation_exits_4(workdir, tmp_path):
    root, data, model = workdir
    junk = tmp_path / "junk.json"
    junk.write_text("this is not a model\n")
    rc = main(["detect", "--model", str(junk), "--data", str(data),
               "--out", str(tmp_path / "d.jsonl")])
    assert rc == 4

    bad_dets = tmp_path / "bad.jsonl"
    bad_dets.write_text('{"wrong": true}\n')
    rc = main(["eval", "--detections", str(bad_dets), "--data", str(data)])
    assert rc == 4


def test_failed_check_exits_5():
    rc = main(["grad-check", "--seeds", "1", "--rel-tol", "1e-18",
               "--abs-tol", "0"])
    assert rc == 5


# ---------------------------------------------------------------------------
# determinism at toy scale (the acceptance suite repeats this at full scale)


def test_gen_data_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--out", str(out), "--seed", "11",
                     "--train", "6", "--val", "3"]) == 0
    assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()
    assert (a / "val.jsonl").read_bytes() == (b / "val.jsonl").read_bytes()
    with open(a / "train.jsonl") as fh:
        next(fh)  # header
        first = json.loads(next(fh))
    image_rel = first["path"]
    assert (a / image_rel).read_bytes() == (b / image_rel).read_bytes()


def test_train_byte_identical(workdir, tmp_path):
    _root, data, _model = workdir
    m1, m2 = tmp_path / "m1.json", tmp_path / "m2.json"
    for out in (m1, m2):
        assert main(["train", "--data", str(data), "--out", str(out),
                     "--seed", "5", "--epochs", "1"]) == 0
    assert m1.read_bytes() == m2.read_bytes()
