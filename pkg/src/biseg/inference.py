"""Proposal provision, per-ROI head execution, NMS and mask voting."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import box_iou
from .config import InferConfig, TrainConfig, get_variant
from .model import backbone_forward, roi_head
from .scoremaps import Roi, filter_rois, sample_positions

PROPOSAL_MODES = ("jitter-gt", "file", "grid")
GRID_SIZES = (16, 24, 32, 48)


class ProposalFileError(ValueError):
    pass


@dataclass
class Detection:
    category: int
    score: float
    box: Roi
    mask: np.ndarray  # [M2, M2] foreground probability of ``category``
    index: int = 0


@dataclass
class InstanceMask:
    category: int
    mask: np.ndarray  # bool [H, W]
    score: float
    box: Roi | None = None


# --------------------------------------------------------------------------
# proposals
# --------------------------------------------------------------------------

def jitter_boxes(
    gt_boxes,
    count: int,
    rng: np.random.Generator,
    image_shape: tuple[int, int],
    shift: float = 0.2,
    scale: tuple[float, float] = (0.7, 1.4),
    neg_fraction: float = 0.25,
    min_size: float = 16.0,
) -> list[Roi]:
    """Perturbed ground-truth boxes plus uniform random negatives."""
    h, w = image_shape
    gt_boxes = [tuple(map(float, b)) for b in gt_boxes]
    if count <= 0:
        return []
    n_neg = int(round(count * neg_fraction)) if gt_boxes else count
    n_pos = count - n_neg
    out = []
    for j in range(n_pos):
        x0, y0, x1, y1 = gt_boxes[j % len(gt_boxes)]
        bw, bh = x1 - x0, y1 - y0
        cx = (x0 + x1) / 2 + rng.uniform(-shift, shift) * bw
        cy = (y0 + y1) / 2 + rng.uniform(-shift, shift) * bh
        nw = bw * rng.uniform(*scale)
        nh = bh * rng.uniform(*scale)
        out.append(Roi(cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2, 1.0))
    for _ in range(n_neg):
        nw = rng.uniform(min_size, w)
        nh = rng.uniform(min_size, h)
        x0 = rng.uniform(0, w - nw)
        y0 = rng.uniform(0, h - nh)
        out.append(Roi(x0, y0, x0 + nw, y0 + nh, 0.0))
    return out


def grid_boxes(image_shape: tuple[int, int], count: int | None = None, step: int = 8) -> list[Roi]:
    h, w = image_shape
    boxes = []
    for size in GRID_SIZES:
        for y in range(0, h - size + 1, step):
            for x in range(0, w - size + 1, step):
                boxes.append(Roi(x, y, x + size, y + size, 0.0))
    if count is not None and count < len(boxes):
        if count <= 0:
            return []
        picks = np.linspace(0, len(boxes) - 1, count).round().astype(int)
        boxes = [boxes[i] for i in picks]
    return boxes


def load_proposal_csv(path) -> dict[str, list[Roi]]:
    """Read ``image_id,x0,y0,x1,y1,objectness`` rows (header required)."""
    path = Path(path)
    out: dict[str, list[Roi]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["image_id", "x0", "y0", "x1", "y1", "objectness"]
        if header is None or [h.strip() for h in header] != expected:
            raise ProposalFileError(f"{path}:1: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ProposalFileError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                x0, y0, x1, y1, obj = (float(v) for v in row[1:])
            except ValueError:
                raise ProposalFileError(f"{path}:{lineno}: non-numeric box field") from None
            if not (x1 > x0 and y1 > y0):
                raise ProposalFileError(f"{path}:{lineno}: box must satisfy x1>x0 and y1>y0")
            out.setdefault(row[0].strip(), []).append(Roi(x0, y0, x1, y1, obj))
    return out


def write_proposal_csv(path, proposals: dict[str, list[Roi]]) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "x0", "y0", "x1", "y1", "objectness"])
        for image_id in sorted(proposals):
            for r in proposals[image_id]:
                wr.writerow([image_id, repr(r.x0), repr(r.y0), repr(r.x1), repr(r.y1), repr(r.objectness)])


def propose(
    mode: str,
    count: int,
    rng: np.random.Generator,
    image_shape: tuple[int, int],
    gt_boxes=None,
    path=None,
    image_id: str | None = None,
    **jitter_kw,
) -> list[Roi]:
    if mode == "jitter-gt":
        return jitter_boxes(gt_boxes or [], count, rng, image_shape, **jitter_kw)
    if mode == "grid":
        return grid_boxes(image_shape, count)
    if mode == "file":
        if path is None:
            raise ValueError("file proposal mode needs a CSV path")
        return load_proposal_csv(path).get(image_id, [])[:count]
    raise ValueError(f"unknown proposal mode {mode!r}; choose from {PROPOSAL_MODES}")


# --------------------------------------------------------------------------
# NMS and mask voting
# --------------------------------------------------------------------------

def nms(dets: list[Detection], iou_thresh: float = 0.3) -> list[Detection]:
    """Per-category greedy NMS. Output is in descending score, ties by input position."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    suppressed = [False] * len(dets)
    keep = []
    for a, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(dets[i])
        for j in order[a + 1 :]:
            if suppressed[j] or dets[j].category != dets[i].category:
                continue
            if box_iou(dets[i].box.box(), dets[j].box.box()) > iou_thresh:
                suppressed[j] = True
    return keep


def paste_mask(mask: np.ndarray, roi: Roi, image_shape: tuple[int, int]):
    """Nearest-neighbour paste of an [M, M] mask over ``roi``; returns (values, coverage)."""
    h, w = image_shape
    m = mask.shape[0]
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    in_y = (ys >= roi.y0) & (ys < roi.y1)
    in_x = (xs >= roi.x0) & (xs < roi.x1)
    ri = np.clip(np.floor((ys - roi.y0) / roi.height * m).astype(np.int64), 0, m - 1)
    ci = np.clip(np.floor((xs - roi.x0) / roi.width * m).astype(np.int64), 0, m - 1)
    cover = in_y[:, None] & in_x[None, :]
    values = np.where(cover, np.asarray(mask, np.float64)[ri[:, None], ci[None, :]], 0.0)
    return values, cover


def vote_average(kept: Detection, all_dets: list[Detection], image_shape, iou_thresh: float = 0.5) -> np.ndarray:
    """Score-weighted average of overlapping same-category masks, before binarisation."""
    num = np.zeros(image_shape)
    den = np.zeros(image_shape)
    for d in all_dets:
        if d.category != kept.category:
            continue
        if box_iou(kept.box.box(), d.box.box()) < iou_thresh:
            continue
        values, cover = paste_mask(d.mask, d.box, image_shape)
        num += d.score * values
        den += d.score * cover
    out = np.zeros(image_shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def mask_vote(
    kept: list[Detection],
    all_dets: list[Detection],
    image_shape: tuple[int, int],
    iou_thresh: float = 0.5,
    binarize_thresh: float = 0.5,
) -> list[InstanceMask]:
    out = []
    for k in kept:
        avg = vote_average(k, all_dets, image_shape, iou_thresh)
        binary = avg > binarize_thresh
        if binary.any():
            out.append(InstanceMask(k.category, binary, float(k.score), k.box))
    return out


# --------------------------------------------------------------------------
# whole image
# --------------------------------------------------------------------------

@dataclass
class ImageResult:
    instances: list[InstanceMask]
    class_map: np.ndarray | None
    detections: list[Detection]
    discarded_rois: int


def detect(fwd, rois: list[Roi], cfg: TrainConfig, variant) -> list[Detection]:
    dets = []
    for i, roi in enumerate(rois):
        res = roi_head(fwd, roi, cfg, variant)
        scores = res.scores.class_scores
        cat = int(np.argmax(scores))  # exact ties go to background
        if cat == 0:
            continue
        dets.append(Detection(cat, float(scores[cat]), roi, np.asarray(res.scores.fg_prob[cat]), i))
    return dets


def semantic_class_map(fwd, image_shape) -> np.ndarray | None:
    if fwd.sem is None:
        return None
    h, w = image_shape
    coarse = np.argmax(fwd.sem.probs, axis=0)
    stride_y = h // coarse.shape[0]
    stride_x = w // coarse.shape[1]
    return np.repeat(np.repeat(coarse, stride_y, axis=0), stride_x, axis=1)


def run_image(image: np.ndarray, proposals: list[Roi], params: dict, cfg: TrainConfig, icfg: InferConfig | None = None) -> ImageResult:
    icfg = icfg or InferConfig()
    variant = get_variant(cfg.variant)
    shape = image.shape[1:]
    fwd = backbone_forward(image, params, cfg, variant)
    rois, dropped = filter_rois(proposals, shape[0], shape[1], stride=16)
    dets = detect(fwd, rois, cfg, variant)
    kept = nms(dets, icfg.nms_iou)
    instances = mask_vote(kept, dets, shape, icfg.vote_iou, icfg.binarize_threshold)
    return ImageResult(instances, semantic_class_map(fwd, shape), dets, dropped)


def crop_mask_to_roi(mask: np.ndarray, roi: Roi, out_res: int) -> np.ndarray:
    """Nearest-neighbour crop-and-resize of an image-sized mask to [M, M]."""
    h, w = mask.shape
    rows = sample_positions(roi.y0, roi.y1, out_res, h)
    cols = sample_positions(roi.x0, roi.x1, out_res, w)
    return mask[rows[:, None], cols[None, :]]
