import numpy as np
import pytest
from hypothesis import given, strategies as st

from biseg import model
from biseg.config import InferConfig, TrainConfig
from biseg.inference import (
    Detection,
    ProposalFileError,
    grid_boxes,
    jitter_boxes,
    load_proposal_csv,
    mask_vote,
    nms,
    propose,
    run_image,
    vote_average,
    write_proposal_csv,
)
from biseg.boxes import box_iou
from biseg.model import init_params
from biseg.scoremaps import Roi
from oracles import iou_scalar, nms_quadratic, vote_pixelwise

seeds = st.integers(0, 2**32 - 1)


def _det(cat, score, box, mask=None, index=0):
    return Detection(cat, score, Roi(*box), np.ones((4, 4)) if mask is None else mask, index)


# --------------------------------------------------------------------------
# proposals
# --------------------------------------------------------------------------

def test_zero_jitter_reproduces_gt():
    gt = [(4.0, 6.0, 30.0, 40.0), (10.0, 10.0, 50.0, 26.0)]
    props = jitter_boxes(gt, 4, np.random.default_rng(0), (64, 64), shift=0.0, scale=(1.0, 1.0), neg_fraction=0.0)
    assert [p.box() for p in props] == gt + gt


def test_zero_count_is_empty():
    assert jitter_boxes([(0, 0, 10, 10)], 0, np.random.default_rng(0), (64, 64)) == []
    assert grid_boxes((64, 64), 0) == []


def test_jitter_calibration_monte_carlo():
    rng = np.random.default_rng(123)
    gt = (16.0, 12.0, 44.0, 40.0)
    props = jitter_boxes([gt], 1000, rng, (64, 64), neg_fraction=0.0)
    hits = sum(iou_scalar(p.box(), gt) >= 0.5 for p in props)
    assert hits / len(props) >= 0.5


def test_proposal_csv_roundtrip(tmp_path):
    props = {"00000": [Roi(1.5, 2.0, 30.0, 31.25, 0.9)], "00001": [Roi(0, 0, 16, 16, 0.1)]}
    write_proposal_csv(tmp_path / "p.csv", props)
    assert load_proposal_csv(tmp_path / "p.csv") == props
    assert propose("file", 10, None, (64, 64), path=tmp_path / "p.csv", image_id="00001") == props["00001"]


@pytest.mark.parametrize(
    "body, line",
    [
        ("id,x0,y0,x1,y1,objectness\n", 1),
        ("image_id,x0,y0,x1,y1,objectness\n00000,1,2,3\n", 2),
        ("image_id,x0,y0,x1,y1,objectness\n00000,0,0,8,8,1\n00000,a,0,8,8,1\n", 3),
        ("image_id,x0,y0,x1,y1,objectness\n00000,8,0,4,8,1\n", 2),
    ],
)
def test_proposal_csv_errors_carry_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ProposalFileError, match=f":{line}:"):
        load_proposal_csv(p)


# --------------------------------------------------------------------------
# NMS
# --------------------------------------------------------------------------

def test_nms_examples():
    kept = nms([_det(1, 0.8, (0, 0, 10, 10)), _det(1, 0.9, (0, 0, 10, 10))], 0.3)
    assert [d.score for d in kept] == [0.9]
    disjoint = [_det(1, 0.5, (0, 0, 10, 10)), _det(1, 0.6, (20, 20, 30, 30)), _det(2, 0.7, (40, 0, 50, 10))]
    assert len(nms(disjoint, 0.3)) == 3


def _random_dets(rng, n):
    dets = []
    for i in range(n):
        x0, y0 = rng.uniform(0, 40, 2)
        w, h = rng.uniform(4, 24, 2)
        score = float(rng.choice([0.25, 0.5, 0.75])) if rng.random() < 0.3 else float(rng.random())
        dets.append(_det(int(rng.integers(1, 3)), score, (x0, y0, x0 + w, y0 + h), index=i))
    return dets


@pytest.mark.parametrize("case", range(100))
def test_nms_matches_quadratic_reference(case):
    rng = np.random.default_rng([5, case])
    dets = _random_dets(rng, int(rng.integers(1, 15)))
    kept = nms(dets, 0.3)
    ref = nms_quadratic([d.box.box() for d in dets], [d.score for d in dets], [d.category for d in dets], 0.3)
    assert [d.index for d in kept] == ref


@given(seeds, st.floats(0.05, 0.95))
def test_nms_invariants(seed, thresh):
    dets = _random_dets(np.random.default_rng(seed), 12)
    kept = nms(dets, thresh)
    assert all(any(k is d for d in dets) for k in kept)
    assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert a.category != b.category or box_iou(a.box.box(), b.box.box()) <= thresh


# --------------------------------------------------------------------------
# mask voting
# --------------------------------------------------------------------------

def test_single_contributor_is_its_own_mask():
    mask = np.array([[0.9, 0.1], [0.6, 0.4]])
    d = _det(1, 0.7, (0, 0, 8, 8), mask)
    [out] = mask_vote([d], [d], (8, 8))
    expected = np.zeros((8, 8), bool)
    expected[0:4, 0:4] = True
    expected[4:8, 0:4] = True
    np.testing.assert_array_equal(out.mask, expected)


def test_duplicate_contributor_is_idempotent():
    mask = np.random.default_rng(0).uniform(size=(5, 5))
    d = _det(2, 0.6, (2, 3, 14, 13), mask)
    twin = _det(2, 0.6, (2, 3, 14, 13), mask.copy(), 1)
    np.testing.assert_allclose(vote_average(d, [d, twin], (16, 16)), vote_average(d, [d], (16, 16)), atol=1e-12)


@given(seeds)
def test_vote_matches_pixelwise_oracle(seed):
    rng = np.random.default_rng(seed)
    base = np.array([3.0, 2.0, 12.0, 13.0])
    dets = []
    for i in range(3):
        box = tuple(base + rng.uniform(-1.5, 1.5, 4))
        dets.append(_det(1, float(rng.uniform(0.2, 1)), box, rng.uniform(size=(6, 6)), i))
    dets.append(_det(2, 0.9, (0, 0, 16, 16), rng.uniform(size=(6, 6)), 3))
    avg = vote_average(dets[0], dets, (16, 16))
    tup = [(d.category, d.score, d.box.box(), d.mask) for d in dets]
    np.testing.assert_allclose(avg, vote_pixelwise(tup, tup[0], (16, 16)), atol=1e-6)


def test_vote_binarises_strictly_above_threshold():
    d = _det(1, 1.0, (0, 0, 4, 4), np.full((2, 2), 0.5))
    assert mask_vote([d], [d], (4, 4)) == []


# --------------------------------------------------------------------------
# whole image
# --------------------------------------------------------------------------

def _cfg():
    return TrainConfig(stride8_widths=(4, 4, 4), stride16_width=4, partitions=(3, 3), roi_res=(6, 12))


def test_zero_model_detects_nothing():
    cfg = _cfg()
    params = {k: np.zeros_like(v) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
    image = np.random.default_rng(1).uniform(size=(3, 32, 32)).astype(np.float32)
    res = run_image(image, grid_boxes((32, 32), 20), params, cfg)
    assert res.instances == [] and res.detections == []
    assert res.class_map.shape == (32, 32) and np.all(res.class_map == 0)


def test_single_forward_per_image_and_determinism():
    cfg = _cfg()
    params = init_params(cfg, np.random.default_rng(2))
    image = np.random.default_rng(3).uniform(size=(3, 32, 32)).astype(np.float32)
    props = grid_boxes((32, 32), 30)
    before = model.FORWARD_CALLS["backbone"]
    a = run_image(image, props, params, cfg, InferConfig())
    assert model.FORWARD_CALLS["backbone"] == before + 1
    b = run_image(image, props, params, cfg, InferConfig())
    assert len(a.instances) == len(b.instances)
    for x, y in zip(a.instances, b.instances):
        assert x.score == y.score and np.array_equal(x.mask, y.mask)
    assert np.array_equal(a.class_map, b.class_map)


def test_perfect_roi_yields_one_instance():
    # hand-built score maps: category 2 inside everywhere within the ROI
    cfg = _cfg()
    params = {k: np.zeros_like(v) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
    cp1, k1 = cfg.num_categories + 1, cfg.partitions[0]
    b1 = params["set1.b"].reshape(k1 * k1, 2, cp1)
    b1[:, 1, 2] = 5.0
    b1[:, 0, 2] = -5.0
    params["set1.b"] = b1.reshape(-1)
    image = np.zeros((3, 32, 32), np.float32)
    res = run_image(image, [Roi(0, 0, 32, 32)], params, cfg)
    assert len(res.instances) == 1 and res.instances[0].category == 2
