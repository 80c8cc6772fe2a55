"""ROI sampling, per-image multi-task loss with gradients, and the SGD loop."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import pairwise_iou
from .config import TrainConfig, get_variant, to_dict
from .inference import crop_mask_to_roi, jitter_boxes
from .losses import loss_cls, loss_mask, loss_ss
from .model import (
    HeadGrads,
    backbone_backward,
    backbone_forward,
    init_params,
    param_shapes,
    roi_head,
    roi_head_backward,
    sem_logit_grad,
)
from .scoremaps import Roi, filter_rois
from .tensor import load_tensor, save_tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lr", "loss_ss", "loss_cls", "loss_mask", "total")


class NumericalError(RuntimeError):
    pass


@dataclass
class LabeledRoi:
    roi: Roi
    label: int  # 0 = background / negative
    gt_mask: np.ndarray | None
    gt_index: int | None
    iou: float = 0.0


def label_rois(proposals: list[Roi], gt, cfg: TrainConfig) -> list[LabeledRoi]:
    """Label every proposal by its best box IoU; positive iff IoU >= threshold."""
    m2 = cfg.roi_res[1]
    if not gt:
        return [LabeledRoi(p, 0, None, None, 0.0) for p in proposals]
    boxes = np.array([g.box for g in gt], np.float64)
    ious = pairwise_iou(np.array([p.box() for p in proposals]).reshape(-1, 4), boxes)
    out = []
    for i, p in enumerate(proposals):
        j = int(np.argmax(ious[i]))
        iou = float(ious[i, j])
        if iou >= cfg.positive_iou_threshold:
            mask = crop_mask_to_roi(gt[j].mask, p, m2).astype(np.float64)
            out.append(LabeledRoi(p, int(gt[j].category), mask, j, iou))
        else:
            out.append(LabeledRoi(p, 0, None, None, iou))
    return out


def sample_rois(proposals: list[Roi], gt, cfg: TrainConfig, rng: np.random.Generator) -> list[LabeledRoi]:
    labeled = label_rois(proposals, gt, cfg)
    if len(labeled) > cfg.rois_per_image:
        pick = rng.choice(len(labeled), size=cfg.rois_per_image, replace=False)
        labeled = [labeled[i] for i in pick]
    return labeled


def downsample_class_map(class_map: np.ndarray, stride: int = 8) -> np.ndarray:
    """Nearest-neighbour (pixel-centre) sampling of a class map at ``stride``."""
    off = stride // 2
    return np.asarray(class_map)[off::stride, off::stride]


@dataclass
class ImageLoss:
    loss_ss: float
    loss_cls: float
    loss_mask: float
    total: float


def image_loss_and_grads(params: dict, image, class_map, labeled: list[LabeledRoi], cfg: TrainConfig):
    """Forward and backward of L_ss + L_cls + L_mask (weighted) on one image."""
    variant = get_variant(cfg.variant)
    w_ss, w_cls, w_mask = cfg.loss_weights
    fwd = backbone_forward(image, params, cfg, variant)
    acc = HeadGrads.zeros(fwd)

    l_ss = 0.0
    d_sem_logits = None
    if fwd.sem is not None:
        l_ss, g = loss_ss(fwd.sem, downsample_class_map(class_map))
        d_sem_logits = w_ss * np.asarray(g, np.float64)

    n_rois = len(labeled)
    n_pos = sum(1 for r in labeled if r.label > 0)
    l_cls = l_mask = 0.0
    for r in labeled:
        res = roi_head(fwd, r.roi, cfg, variant)
        lc, d_logits = loss_cls(res.scores, r.label)
        l_cls += lc / n_rois
        d_logits = d_logits * (w_cls / n_rois)
        d_fg = None
        if r.label > 0:
            lm, g = loss_mask(res.scores.fg_prob[r.label], r.gt_mask)
            l_mask += lm / n_pos
            d_fg = np.zeros_like(res.scores.fg_prob)
            d_fg[r.label] = g * (w_mask / n_pos)
        roi_head_backward(res, fwd, acc, d_fg=d_fg, d_logits=d_logits)

    if fwd.sem is not None:
        d_sem_logits = d_sem_logits + sem_logit_grad(fwd, acc.sem_probs)
    grads = backbone_backward(fwd, params, acc.set1, acc.set2, d_sem_logits)
    total = w_ss * l_ss + w_cls * l_cls + w_mask * l_mask
    return ImageLoss(l_ss, l_cls, l_mask, total), grads


def training_proposals(samples, cfg: TrainConfig, rng: np.random.Generator) -> list[list[Roi]]:
    """Fixed per-image proposal pools, drawn once before training."""
    pools = []
    for s in samples:
        h, w = s.class_map.shape
        props = jitter_boxes([i.box for i in s.instances], cfg.proposals_per_image, rng, (h, w))
        kept, _ = filter_rois(props, h, w, stride=16)
        pools.append(kept)
    return pools


def train_toy(samples, cfg: TrainConfig, log_path=None, params: dict | None = None, progress_every: int = 0):
    """Plain SGD, one image per step. Returns ``(params, rows)``; raises NumericalError on NaN."""
    if not samples:
        raise ValueError("train_toy: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(cfg, rng)
    else:
        params = {k: v.copy() for k, v in params.items()}
    pools = training_proposals(samples, cfg, rng)
    rows = []
    order = np.array([], dtype=np.int64)
    fh = writer = None
    if log_path is not None:
        fh = Path(log_path).open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for it in range(cfg.total_iterations):
            if it % len(samples) == 0:
                order = rng.permutation(len(samples))
            idx = int(order[it % len(samples)])
            s = samples[idx]
            labeled = sample_rois(pools[idx], s.instances, cfg, rng)
            loss, grads = image_loss_and_grads(params, s.image, s.class_map, labeled, cfg)
            if not np.isfinite(loss.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"loss diverged (non-finite) at iteration {it}")
            lr = cfg.lr_at(it)
            if cfg.clip_grad_norm is not None:
                norm = float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))
                if norm > cfg.clip_grad_norm:
                    scale = np.float32(cfg.clip_grad_norm / norm)
                    grads = {k: g * scale for k, g in grads.items()}
            for name, g in grads.items():
                params[name] = (params[name] - np.float32(lr * cfg.mult_for(name)) * g).astype(np.float32)
            row = (it, lr, loss.loss_ss, loss.loss_cls, loss.loss_mask, loss.total)
            rows.append(row)
            if writer is not None:
                writer.writerow([it, repr(lr)] + [f"{v:.9g}" for v in row[2:]])
            if progress_every and (it + 1) % progress_every == 0:
                recent = np.mean([r[-1] for r in rows[-progress_every:]])
                log.info("%s iter %d lr %g loss %.4f", cfg.variant, it + 1, lr, recent)
    finally:
        if fh is not None:
            fh.close()
    return params, rows


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(out_dir, params: dict, cfg: TrainConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"parameters": {}, "config": to_dict(cfg)}
    for name in sorted(params):
        save_tensor(out / f"{name}.ten", params[name])
        manifest["parameters"][name] = list(params[name].shape)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_checkpoint(ckpt_dir):
    from .config import TrainConfig, from_dict

    ckpt = Path(ckpt_dir)
    mpath = ckpt / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath}: checkpoint manifest not found")
    manifest = json.loads(mpath.read_text())
    cfg = from_dict(TrainConfig, manifest["config"], str(mpath))
    expected = param_shapes(cfg)
    params = {}
    for name, shape in manifest["parameters"].items():
        t = load_tensor(ckpt / f"{name}.ten")
        if list(t.shape) != list(shape) or tuple(shape) != expected.get(name):
            raise ValueError(f"{ckpt / (name + '.ten')}: shape {t.shape} does not match manifest/config")
        params[name] = t
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ValueError(f"{mpath}: missing parameters {missing}")
    return params, cfg
