"""Region-based mAP (mAP^r) and semantic segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class ScoredRegion:
    """A predicted region for one category in one image."""

    image_id: str
    score: float
    mask: np.ndarray  # bool [H, W]
    index: int = 0


@dataclass
class EvalResult:
    ap: dict[float, dict[int, float]]  # threshold -> category -> AP
    map_r: dict[float, float]
    mean_accuracy: float | None
    mean_iu: float | None
    num_gt: dict[int, int] = field(default_factory=dict)
    num_det: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ap": {f"{t:g}": {str(c): v for c, v in sorted(d.items())} for t, d in sorted(self.ap.items())},
            "mAP_r": {f"{t:g}": v for t, v in sorted(self.map_r.items())},
            "mean_accuracy": self.mean_accuracy,
            "mean_iu": self.mean_iu,
            "num_gt": {str(c): n for c, n in sorted(self.num_gt.items())},
            "num_det": {str(c): n for c, n in sorted(self.num_det.items())},
        }


def region_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"region_iou: mask shapes differ {a.shape} vs {b.shape}")
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def match_detections(dets: list[ScoredRegion], gts: dict[str, list[np.ndarray]], iou_thresh: float):
    """Greedy matching in score order; returns TP flags in that order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, dets[i].index))
    used = {img: [False] * len(g) for img, g in gts.items()}
    flags = []
    for i in order:
        d = dets[i]
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts.get(d.image_id, [])):
            if used[d.image_id][j]:
                continue
            iou = region_iou(d.mask, g)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= iou_thresh:
            used[d.image_id][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap_from_flags(flags: list[bool], num_gt: int) -> float:
    """All-point interpolated AP from TP/FP flags sorted by descending score."""
    if num_gt == 0:
        return 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, np.float64))
    fp = np.cumsum(~np.asarray(flags, bool))
    recall = np.concatenate([[0.0], tp / num_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / (tp + fp), [0.0]])
    # precision envelope
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def average_precision(dets: list[ScoredRegion], gts: dict[str, list[np.ndarray]], iou_thresh: float) -> float:
    num_gt = sum(len(g) for g in gts.values())
    return ap_from_flags(match_detections(dets, gts, iou_thresh), num_gt)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ShapeError(f"semantic_metrics: prediction {pred.shape} vs ground truth {gt.shape}")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"semantic_metrics: {name} class id out of range [0, {num_classes - 1}]")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def metrics_from_confusion(conf: np.ndarray) -> tuple[float, float]:
    """(mean accuracy, mean IU) over classes present in the ground truth. Rows are gt."""
    tp = np.diag(conf).astype(np.float64)
    gt_c = conf.sum(axis=1).astype(np.float64)
    pred_c = conf.sum(axis=0).astype(np.float64)
    present = gt_c > 0
    acc = tp[present] / gt_c[present]
    iu = tp[present] / (gt_c[present] + pred_c[present] - tp[present])
    return float(acc.mean()), float(iu.mean())


def semantic_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[float, float]:
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes))


def evaluate(
    predictions: dict[str, list[tuple[int, float, np.ndarray]]],
    ground_truth: dict[str, list[tuple[int, np.ndarray]]],
    num_categories: int,
    thresholds=(0.5, 0.7),
    semantic_pred: dict[str, np.ndarray] | None = None,
    semantic_gt: dict[str, np.ndarray] | None = None,
) -> EvalResult:
    """Dataset-level evaluation.

    ``predictions[image_id]`` lists ``(category, score, mask)``;
    ``ground_truth[image_id]`` lists ``(category, mask)``. ``num_categories``
    counts object categories only.
    """
    ap: dict[float, dict[int, float]] = {t: {} for t in thresholds}
    num_gt, num_det = {}, {}
    for c in range(1, num_categories + 1):
        gts = {img: [m for cat, m in g if cat == c] for img, g in ground_truth.items()}
        n = sum(len(v) for v in gts.values())
        dets = []
        for img in sorted(predictions):
            for i, (cat, score, mask) in enumerate(predictions[img]):
                if cat == c:
                    dets.append(ScoredRegion(img, float(score), mask, i))
        num_gt[c], num_det[c] = n, len(dets)
        if n == 0:
            continue
        for t in thresholds:
            ap[t][c] = average_precision(dets, gts, t)
    map_r = {t: (float(np.mean(list(ap[t].values()))) if ap[t] else 0.0) for t in thresholds}

    mean_acc = mean_iu = None
    if semantic_pred is not None and semantic_gt is not None:
        conf = np.zeros((num_categories + 1, num_categories + 1), np.int64)
        for img in sorted(semantic_gt):
            if img in semantic_pred:
                conf += confusion_matrix(semantic_pred[img], semantic_gt[img], num_categories + 1)
        mean_acc, mean_iu = metrics_from_confusion(conf)
    return EvalResult(ap, map_r, mean_acc, mean_iu, num_gt, num_det)


def format_table(rows, thresholds=(0.5, 0.7)) -> str:
    """Plain-text table: method | mAP^r@t(%) for each threshold t."""
    width = max([len("method")] + [len(r[0]) for r in rows])
    heads = [f"mAP^r@{t:g}(%)" for t in thresholds]
    lines = [" | ".join([f"{'method':<{width}}"] + heads)]
    lines.append("-" * len(lines[0]))
    for name, *vals in rows:
        cells = [f"{100 * v:>{len(h)}.1f}" for v, h in zip(vals, heads)]
        lines.append(" | ".join([f"{name:<{width}}"] + cells))
    return "\n".join(lines)
