"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed together at the end of the session (see conftest.py).
Criteria 5-7 train real models and take several minutes each; they carry
the ``slow`` marker so ``pytest -m "not slow"`` skips them during development.
"""
from __future__ import annotations

import csv
import hashlib
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from biseg.bayes import RoiPosterior, bayes_combine, mask_and_score
from biseg.cli import main
from biseg.config import InferConfig, TrainConfig, layered
from biseg.evaluation import average_precision, match_detections
from biseg.experiments import run_ablation, seed_means
from biseg.gradcheck import SCOPES, grad_check
from biseg.inference import nms
from biseg.scoremaps import RoiLikelihood, assemble
from biseg.tensor import conv2d, softmax_channels
from oracles import ap_prefix_oracle, assemble_loops, conv2d_loops, nms_quadratic

ROOT = Path(__file__).resolve().parents[1]
ABLATION_CONFIG = ROOT / "configs" / "ablation.json"
LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


# --------------------------------------------------------------------------
# 1
# --------------------------------------------------------------------------

def test_criterion_1_full_scale_reproduction_out_of_scope():
    # Full-scale numbers need an ImageNet-pretrained ResNet-101 and PASCAL VOC
    # training; the criterion itself declares them infeasible and substitutes 2-8.
    record(1, True, "full-scale mAP^r reproduction declared infeasible; substituted by criteria 2-8")


# --------------------------------------------------------------------------
# 2
# --------------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    reports = [grad_check(scope, trials=10, seed=0) for scope in sorted(SCOPES)]
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.worst)
    ok = all(r.passed(1e-4) for r in reports) and elapsed < 120.0
    record(2, ok, f"{len(reports)} scopes x 10 trials, max rel err {worst.worst:.2e} ({worst.scope}), {elapsed:.0f}s")
    assert all(r.passed(1e-4) for r in reports), [r.to_json() for r in reports if not r.passed()]
    assert elapsed < 120.0


# --------------------------------------------------------------------------
# 3
# --------------------------------------------------------------------------

def _assemble_cases():
    from test_scoremaps import random_case

    bad = 0
    for case in range(200):
        sms, roi, m = random_case(np.random.default_rng([42, case]))
        lik = assemble(sms, roi, m)
        inside, outside = assemble_loops(sms.maps, sms.k, sms.stride, sms.num_categories, roi.box(), m)
        bad += lik.inside.tobytes() != inside.tobytes() or lik.outside.tobytes() != outside.tobytes()
    return bad


def _nms_cases():
    from test_inference import _random_dets

    bad = 0
    for case in range(100):
        rng = np.random.default_rng([5, case])
        dets = _random_dets(rng, int(rng.integers(1, 15)))
        ref = nms_quadratic([d.box.box() for d in dets], [d.score for d in dets], [d.category for d in dets], 0.3)
        bad += [d.index for d in nms(dets, 0.3)] != ref
    return bad


def _ap_cases():
    from test_evaluation import _random_region_set

    bad = 0
    for case in range(50):
        dets, gts = _random_region_set(np.random.default_rng([77, case]))
        n = sum(len(v) for v in gts.values())
        ref = ap_prefix_oracle(match_detections(dets, gts, 0.5), n)
        bad += abs(average_precision(dets, gts, 0.5) - ref) > 1e-12
    return bad


def _conv_cases():
    worst = 0.0
    for case in range(100):
        rng = np.random.default_rng([11, case])
        cin, cout = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = rng.integers(k, 8, size=2)
        x, wt, b = rng.normal(size=(cin, h, w)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
        worst = max(worst, float(np.abs(conv2d(x, wt, b, stride, pad) - conv2d_loops(x, wt, b, stride, pad)).max()))
    return worst


def test_criterion_3_oracle_equivalence():
    a, n, ap, conv = _assemble_cases(), _nms_cases(), _ap_cases(), _conv_cases()
    ok = a == 0 and n == 0 and ap == 0 and conv <= 1e-6
    record(3, ok, f"assemble 200/200 bitwise: {a == 0}, NMS 100/100: {n == 0}, AP 50/50: {ap == 0}, "
                  f"conv2d max abs err {conv:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 4
# --------------------------------------------------------------------------

def test_criterion_4_bayes_properties():
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(1000):
        c, m = int(rng.integers(2, 6)), int(rng.integers(1, 16))
        lik = RoiLikelihood(rng.normal(size=(c, m, m)) * 5, rng.normal(size=(c, m, m)) * 5)
        post = bayes_combine(np.ones((c, m, m)), lik)
        failures += post.inside.tobytes() != lik.inside.tobytes() or post.outside.tobytes() != lik.outside.tobytes()

        prior = softmax_channels(rng.normal(size=(c, m, m)))
        veto = int(rng.integers(c))
        prior[veto] = 0.0
        failures += bool(np.any(bayes_combine(prior, lik).inside[veto] != 0.0))

        logits = mask_and_score(RoiPosterior(lik.inside, lik.outside)).class_logits
        shift = float(rng.uniform(-1e3, 1e3))
        failures += int(np.argmax(softmax_channels(logits))) != int(np.argmax(softmax_channels(logits + shift)))
    record(4, failures == 0, f"3 properties x 1000 trials, {failures} violations")
    assert failures == 0


# --------------------------------------------------------------------------
# 5 and 6
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation():
    cfg = layered(TrainConfig, ABLATION_CONFIG, "train")
    icfg = layered(InferConfig, ABLATION_CONFIG, "infer")
    assert cfg.total_iterations <= 3000
    t0 = time.perf_counter()
    rows = run_ablation(cfg, icfg, seeds=(0, 1, 2))
    return rows, seed_means(rows), time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_variant_ordering(ablation):
    rows, means, elapsed = ablation
    m = {v: means[v]["map50"] for v in means}
    ordered = m["biseg-fused"] > m["biseg-single"] > m["naive-multitask"] >= m["fcis-star"]
    per_seed = {
        s: next(r.map50 for r in rows if r.variant == "biseg-fused" and r.seed == s)
        - next(r.map50 for r in rows if r.variant == "fcis-star" and r.seed == s)
        for s in (0, 1, 2)
    }
    margin_ok = all(d > 0 for d in per_seed.values())
    ok = ordered and margin_ok and elapsed < 45 * 60
    summary = ", ".join(f"{v} {100 * x:.1f}" for v, x in m.items())
    margins = ", ".join(f"{100 * d:+.1f}" for d in per_seed.values())
    record(5, ok, f"mean mAP^r@0.5: {summary}; fused-fcis per seed {margins}; {elapsed / 60:.1f} min")
    assert ordered, m
    assert margin_ok, per_seed
    assert elapsed < 45 * 60


@pytest.mark.slow
def test_criterion_6_semantic_mean_iu(ablation):
    _, means, _ = ablation
    fused, naive = means["biseg-fused"]["mean_iu"], means["naive-multitask"]["mean_iu"]
    ok = fused >= naive
    record(6, ok, f"mean IU biseg-fused {100 * fused:.1f} vs naive-multitask {100 * naive:.1f}")
    assert ok


# --------------------------------------------------------------------------
# 7
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_sweep(tmp_path):
    for split, seed, n in (("train", 1000, 200), ("test", 2000, 100)):
        assert main(["gen", "--n", str(n), "--seed", str(seed), "--out", str(tmp_path / split)]) == 0
    code = main(["sweep", "--config", str(ABLATION_CONFIG), "--train", str(tmp_path / "train"),
                 "--test", str(tmp_path / "test"), "--pairs", "7,7", "7,9", "7,11", "--out", str(tmp_path / "sweep")])
    rows = list(csv.reader((tmp_path / "sweep" / "sweep.csv").open()))
    shape_ok = code == 0 and rows[0] == ["k1", "k2", "mAPr05", "mAPr07"] and len(rows) == 4
    mono = all(float(r[3]) <= float(r[2]) for r in rows[1:])
    detail = "; ".join(f"({r[0]},{r[1]}) {100 * float(r[2]):.1f}/{100 * float(r[3]):.1f}" for r in rows[1:])
    record(7, shape_ok and mono, f"3 rows, mAP^r@0.5/@0.7: {detail}")
    assert shape_ok and mono


# --------------------------------------------------------------------------
# 8
# --------------------------------------------------------------------------

def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _pipeline(root: Path, cfg: Path) -> dict[str, str]:
    d = lambda name: str(root / name)  # noqa: E731
    cmds = {
        "gen": ["gen", "--n", "6", "--seed", "3", "--out", d("data")],
        "train": ["train", "--config", str(cfg), "--data", d("data"), "--iters", "40", "--out", d("ckpt")],
        "infer": ["infer", "--ckpt", d("ckpt"), "--data", d("data"), "--seed", "3", "--out", d("pred")],
        "eval": ["eval", "--pred", d("pred"), "--data", d("data"), "--out", d("eval")],
        "render": ["render", "--pred", d("pred"), "--data", d("data"), "--out", d("render")],
        "gradcheck": ["gradcheck", "--scope", "assemble", "bayes_combine", "--trials", "3", "--out", d("grad")],
        "sweep": ["sweep", "--config", str(cfg), "--train", d("data"), "--test", d("data"), "--iters", "10",
                  "--pairs", "3,3", "3,5", "--out", d("sweep")],
    }
    digests = {}
    for name, argv in cmds.items():
        assert main(argv) == 0, name
        digests[name] = _digest(Path(argv[argv.index("--out") + 1]))
    return digests


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({"train": {"partitions": [3, 5], "roi_res": [10, 20], "stride8_widths": [8, 8, 8],
                                         "stride16_width": 16, "lr_schedule": [[30, 0.1], [10, 0.01]],
                                         "lr_mult": {"set1": 30, "set2": 30}}}))
    # identical inputs includes identical paths (they are echoed into config.json), so wipe and re-run in place
    work = tmp_path / "run"
    first = _pipeline(work, cfg)
    shutil.rmtree(work)
    second = _pipeline(work, cfg)
    same = {k: first[k] == second[k] for k in first}
    record(8, all(same.values()), f"{sum(same.values())}/{len(same)} commands bitwise identical on re-run")
    assert all(same.values()), same
