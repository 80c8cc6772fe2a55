import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from biseg.evaluation import (
    ScoredRegion,
    ap_from_flags,
    average_precision,
    evaluate,
    match_detections,
    region_iou,
    semantic_metrics,
)
from oracles import ap_prefix_oracle, confusion_oracle

seeds = st.integers(0, 2**32 - 1)


def test_region_iou_examples():
    a = np.zeros((4, 4), bool)
    a[0:2, 0:2] = True
    assert region_iou(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[2:4, 2:4] = True
    assert region_iou(a, b) == 0.0
    # two 4-pixel squares sharing 2 pixels inside a 3x3 grid
    p = np.zeros((3, 3), bool)
    q = np.zeros((3, 3), bool)
    p[0:2, 0:2] = True
    q[0:2, 1:3] = True
    assert region_iou(p, q) == pytest.approx(1 / 3)


def _mask(h, w, box):
    m = np.zeros((h, w), bool)
    m[box[1]:box[3], box[0]:box[2]] = True
    return m


def test_ap_threshold_straddle():
    gt = _mask(10, 10, (0, 0, 10, 6))  # 60 px
    det = _mask(10, 10, (0, 0, 10, 10))  # IoU 0.6
    dets = [ScoredRegion("a", 0.9, det)]
    assert average_precision(dets, {"a": [gt]}, 0.5) == 1.0
    assert average_precision(dets, {"a": [gt]}, 0.7) == 0.0


def test_no_detections_zero_ap():
    assert average_precision([], {"a": [_mask(4, 4, (0, 0, 2, 2))]}, 0.5) == 0.0


def test_documented_five_detections_three_gts():
    # hand-set ranking: TP, FP, TP, FP, TP with three ground truths
    flags = [True, False, True, False, True]
    assert ap_from_flags(flags, 3) == pytest.approx(ap_prefix_oracle(flags, 3))
    assert ap_from_flags(flags, 3) == pytest.approx((1 / 3) * 1 + (1 / 3) * (2 / 3) + (1 / 3) * (3 / 5))


def _random_region_set(rng):
    """Random per-image masks and detections on a coarse grid of blobs."""
    gts, dets = {}, []
    for img in range(int(rng.integers(1, 4))):
        iid = f"{img:05d}"
        gts[iid] = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.integers(0, 12, 2)
            gts[iid].append(_mask(16, 16, (x, y, x + 4, y + 4)))
        for j in range(int(rng.integers(0, 6))):
            x, y = rng.integers(0, 12, 2)
            score = float(rng.choice([0.3, 0.6])) if rng.random() < 0.3 else float(rng.random())
            dets.append(ScoredRegion(iid, score, _mask(16, 16, (x, y, x + 4, y + 4)), j))
    return dets, gts


@pytest.mark.parametrize("case", range(50))
def test_ap_matches_prefix_oracle(case):
    rng = np.random.default_rng([77, case])
    dets, gts = _random_region_set(rng)
    n = sum(len(v) for v in gts.values())
    flags = match_detections(dets, gts, 0.5)
    assert average_precision(dets, gts, 0.5) == pytest.approx(ap_prefix_oracle(flags, n), abs=1e-12)


@given(seeds)
def test_ap_is_rank_only(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_region_set(rng)
    warped = [ScoredRegion(d.image_id, float(np.exp(3 * d.score) - 7), d.mask, d.index) for d in dets]
    assert average_precision(dets, gts, 0.5) == average_precision(warped, gts, 0.5)


@given(seeds)
def test_low_false_positive_never_helps_and_unclaimed_true_positive_never_hurts(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_region_set(rng)
    assume(sum(len(v) for v in gts.values()) > 0)
    base = average_precision(dets, gts, 0.5)
    fp = ScoredRegion("00000", -1.0, np.zeros((16, 16), bool), 99)
    assert average_precision(dets + [fp], gts, 0.5) <= base + 1e-12
    # a top-ranked hit can steal a ground truth from a later detection, so only
    # ground truths no detection reaches are guaranteed not to reorder matches
    free = [(k, g) for k, v in gts.items() for g in v
            if all(region_iou(d.mask, g) < 0.5 for d in dets if d.image_id == k)]
    assume(free)
    img, g = free[0]
    tp = ScoredRegion(img, 2.0, g.copy(), -1)
    assert average_precision([tp] + dets, gts, 0.5) >= base - 1e-12


@given(seeds)
def test_threshold_monotone_and_single_match(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_region_set(rng)
    assert average_precision(dets, gts, 0.7) <= average_precision(dets, gts, 0.5) + 1e-12
    n = sum(len(v) for v in gts.values())
    assert sum(match_detections(dets, gts, 0.5)) <= n


# --------------------------------------------------------------------------
# semantic metrics
# --------------------------------------------------------------------------

def test_semantic_examples():
    gt = np.array([[0, 1], [2, 1]])
    assert semantic_metrics(gt, gt, 3) == (1.0, 1.0)
    acc, iu = semantic_metrics(np.zeros_like(gt), gt, 3)
    # background IU = 1/4, object IUs 0
    assert iu == pytest.approx((0.25 + 0 + 0) / 3)
    assert acc == pytest.approx(1 / 3)


@given(seeds)
def test_semantic_matches_confusion_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, (8, 8))
    pred = rng.integers(0, 3, (8, 8))
    acc, iu = semantic_metrics(pred, gt, 3)
    ref_acc, ref_iu = confusion_oracle(pred, gt, 3)
    assert acc == pytest.approx(ref_acc, abs=1e-12) and iu == pytest.approx(ref_iu, abs=1e-12)


def test_perfect_detector_scores_one():
    rng = np.random.default_rng(4)
    gts = {}
    for i in range(3):
        gts[f"{i:05d}"] = [(int(rng.integers(1, 4)), _mask(16, 16, (j * 5, j * 5, j * 5 + 4, j * 5 + 4))) for j in range(3)]
    preds = {k: [(c, 0.9, m) for c, m in v] for k, v in gts.items()}
    res = evaluate(preds, gts, 3)
    assert res.map_r[0.5] == 1.0 and res.map_r[0.7] == 1.0
