import csv
import json

import numpy as np
import pytest

from biseg.cli import main, with_iterations, write_predictions
from biseg.config import TrainConfig
from biseg.inference import ImageResult, InstanceMask
from biseg.synth import load_dataset

TINY = {"train": {"stride8_widths": [8, 8, 8], "stride16_width": 8, "partitions": [3, 3],
                  "roi_res": [6, 12], "proposals_per_image": 8, "rois_per_image": 8}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen", "--n", "3", "--seed", "4", "--out", str(root / "data")]) == 0
    return root, cfg


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_infer_eval_render(workspace, capsys):
    root, cfg = workspace
    data = root / "data"
    code, out, _ = _run(capsys, ["train", "--config", cfg, "--data", data, "--iters", 4, "--out", root / "ck",
                                 "--variant", "biseg-single", "--threads", 1])
    assert code == 0 and "biseg-single" in out
    manifest = json.loads((root / "ck" / "manifest.json").read_text())
    assert "set2.w" not in manifest["parameters"] and "sem.w" in manifest["parameters"]
    assert json.loads((root / "ck" / "config.json").read_text())["train"]["variant"] == "biseg-single"

    code, _, _ = _run(capsys, ["infer", "--ckpt", root / "ck", "--data", data, "--out", root / "pred"])
    assert code == 0
    for sub in ("instances", "detections", "classes", "masks"):
        assert len(list((root / "pred" / sub).iterdir())) == 3

    code, out, _ = _run(capsys, ["eval", "--pred", root / "pred", "--data", data, "--iou", "0.5,0.7",
                                 "--out", root / "ev"])
    assert code == 0 and "mAP^r@0.5(%)" in out
    body = json.loads((root / "ev" / "eval.json").read_text())
    assert set(body["mAP_r"]) == {"0.5", "0.7"}

    code, _, _ = _run(capsys, ["render", "--pred", root / "pred", "--data", data, "--out", root / "rd"])
    assert code == 0 and len(list((root / "rd" / "overlays").glob("*_instances.ppm"))) == 3


def test_eval_perfect_detector(workspace, capsys, tmp_path):
    root, _ = workspace
    samples = load_dataset(root / "data")
    results = {
        s.id: ImageResult([InstanceMask(i.category, i.mask, 1.0) for i in s.instances], s.class_map, [], 0)
        for s in samples
    }
    write_predictions(tmp_path, results, {s.id: s.class_map.shape for s in samples})
    code, out, _ = _run(capsys, ["eval", "--pred", tmp_path, "--data", root / "data"])
    assert code == 0
    body = json.loads((tmp_path / "eval.json").read_text())
    assert body["mAP_r"] == {"0.5": 1.0, "0.7": 1.0}
    assert body["mean_iu"] == 1.0


def test_eval_falls_back_to_instance_map(workspace, capsys, tmp_path):
    root, _ = workspace
    samples = load_dataset(root / "data")
    results = {s.id: ImageResult([InstanceMask(i.category, i.mask, 1.0) for i in s.instances], None, [], 0)
               for s in samples}
    write_predictions(tmp_path, results, {s.id: s.class_map.shape for s in samples})
    for p in (tmp_path / "masks").iterdir():
        p.unlink()
    assert _run(capsys, ["eval", "--pred", tmp_path, "--data", root / "data"])[0] == 0
    assert json.loads((tmp_path / "eval.json").read_text())["mAP_r"]["0.5"] == 1.0


def test_sweep_emits_table_shaped_csv(workspace, capsys):
    root, cfg = workspace
    data = root / "data"
    code, _, _ = _run(capsys, ["sweep", "--config", cfg, "--train", data, "--test", data, "--iters", 2,
                               "--pairs", "3,3", "3,5", "--out", root / "sw"])
    assert code == 0
    rows = list(csv.reader((root / "sw" / "sweep.csv").open()))
    assert rows[0] == ["k1", "k2", "mAPr05", "mAPr07"]
    assert [r[:2] for r in rows[1:]] == [["3", "3"], ["3", "5"]]
    assert all(float(r[3]) <= float(r[2]) for r in rows[1:])


def test_gradcheck_command(capsys, tmp_path):
    code, out, _ = _run(capsys, ["gradcheck", "--scope", "bayes_combine", "--trials", 10, "--out", tmp_path])
    assert code == 0 and "bayes_combine" in out
    [rep] = json.loads((tmp_path / "gradcheck.json").read_text())
    assert max(rep["max_rel_err"].values()) < 1e-6


@pytest.mark.parametrize(
    "argv, code, needle",
    [
        (["train", "--data", "missing", "--out", "x"], 2, "data error"),
        (["train", "--out", "x", "--variant", "bogus"], 1, ""),
        (["gradcheck", "--scope", "nope"], 1, "unknown scope"),
        (["infer", "--ckpt", "missing", "--data", "missing", "--out", "x"], 2, "manifest"),
        (["gen", "--n", "2"], 1, "--out is required"),
        (["frobnicate"], 1, ""),
    ],
)
def test_error_exit_codes(capsys, tmp_path, monkeypatch, argv, code, needle):
    monkeypatch.chdir(tmp_path)
    got, _, err = _run(capsys, argv)
    assert got == code
    assert needle in err
    if needle:
        assert len(err.strip().splitlines()) == 1


def test_malformed_config_is_usage_error(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"rois_per_image": 4,,}}')
    code, _, err = _run(capsys, ["train", "--config", bad, "--data", tmp_path, "--out", tmp_path / "o"])
    assert code == 1 and "bad.json" in err and "line 1" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(capsys, workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "hot.json"
    hot = {"train": dict(TINY["train"], lr_schedule=[[20, 1e30]])}
    cfg.write_text(json.dumps(hot))
    code, _, err = _run(capsys, ["train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "o"])
    assert code == 3 and "iteration" in err


def test_with_iterations_keeps_proportions():
    cfg = with_iterations(TrainConfig(), 300)
    assert cfg.lr_schedule == [(200, 1e-3), (100, 1e-4)]
    assert with_iterations(TrainConfig(), 1).total_iterations == 1
