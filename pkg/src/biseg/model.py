"""Toy backbone with a semantic head and two position-sensitive score-map heads.

The backbone is a stack of 3x3 conv + ReLU layers reaching stride 8 (tap for
the semantic head and the finer score-map set) and one more stride-2 layer
reaching stride 16 (tap for the coarser set). All heads are 1x1 convolutions
on the shared features. Which heads exist depends on the variant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bayes import (
    RoiPosterior,
    RoiScores,
    SemanticHeadOutput,
    bayes_combine,
    bayes_combine_backward,
    crop_prior,
    crop_prior_backward,
    mask_and_score,
    mask_and_score_backward,
)
from .config import TrainConfig, VariantSpec, get_variant
from .scoremaps import (
    Roi,
    RoiLikelihood,
    ScoreMapSet,
    assemble,
    assemble_backward,
    fuse,
    fuse_backward,
)
from .tensor import (
    ShapeError,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
    softmax_channels_backward,
)

# incremented once per backbone forward; lets callers assert feature sharing
FORWARD_CALLS = {"backbone": 0}


def backbone_layers(cfg: TrainConfig):
    """(name, in_ch, out_ch, stride) for every 3x3 conv; the last one is the stride-16 tap."""
    layers = []
    cin = 3
    strides = [2, 2, 2] + [1] * (len(cfg.stride8_widths) - 3)
    for i, (w, s) in enumerate(zip(cfg.stride8_widths, strides)):
        layers.append((f"backbone.{i}", cin, w, s))
        cin = w
    layers.append(("stage16", cin, cfg.stride16_width, 2))
    return layers


def param_shapes(cfg: TrainConfig, variant: VariantSpec | None = None) -> dict[str, tuple]:
    variant = variant or get_variant(cfg.variant)
    cp1 = cfg.num_categories + 1
    k1, k2 = cfg.partitions
    shapes = {}
    for name, cin, cout, _ in backbone_layers(cfg):
        shapes[f"{name}.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.b"] = (cout,)
    c8 = cfg.stride8_widths[-1]
    c16 = cfg.stride16_width
    if variant.use_semantic_head:
        shapes["sem.w"] = (cp1, c8, 1, 1)
        shapes["sem.b"] = (cp1,)
    shapes["set1.w"] = (2 * k1 * k1 * cp1, c16, 1, 1)
    shapes["set1.b"] = (2 * k1 * k1 * cp1,)
    if variant.use_fusion:
        shapes["set2.w"] = (2 * k2 * k2 * cp1, c8, 1, 1)
        shapes["set2.b"] = (2 * k2 * k2 * cp1,)
    return shapes


def init_params(cfg: TrainConfig, rng: np.random.Generator, variant: VariantSpec | None = None):
    """Glorot-uniform weights, zero biases, drawn in sorted-name order."""
    params = {}
    for name, shape in param_shapes(cfg, variant).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, np.float32)
            continue
        cout, cin, kh, kw = shape
        s = np.sqrt(6.0 / (cin * kh * kw + cout * kh * kw))
        params[name] = rng.uniform(-s, s, size=shape).astype(np.float32)
    return params


@dataclass
class Forward:
    feat8: np.ndarray
    feat16: np.ndarray
    sem: SemanticHeadOutput | None
    set1: ScoreMapSet
    set2: ScoreMapSet | None
    cache: list = field(default_factory=list, repr=False)


def backbone_forward(image: np.ndarray, params: dict, cfg: TrainConfig, variant: VariantSpec | None = None) -> Forward:
    variant = variant or get_variant(cfg.variant)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be [3, H, W], got {image.shape}")
    h, w = image.shape[1:]
    if h % 16 or w % 16:
        raise ShapeError(
            f"image size {h}x{w} not divisible by 16; pad to {-(-h // 16) * 16}x{-(-w // 16) * 16}"
        )
    FORWARD_CALLS["backbone"] += 1
    x = image
    cache = []
    feat8 = None
    for name, _, _, stride in backbone_layers(cfg):
        pre = conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=1)
        cache.append((name, x, pre, stride))
        x = relu(pre)
        if name != "stage16":
            feat8 = x
    feat16 = x
    cp1 = cfg.num_categories + 1
    k1, k2 = cfg.partitions
    sem = None
    if variant.use_semantic_head:
        sem = SemanticHeadOutput.from_logits(conv2d(feat8, params["sem.w"], params["sem.b"]))
    set1 = ScoreMapSet(conv2d(feat16, params["set1.w"], params["set1.b"]), k1, 16, cp1)
    set2 = None
    if variant.use_fusion:
        set2 = ScoreMapSet(conv2d(feat8, params["set2.w"], params["set2.b"]), k2, 8, cp1)
    return Forward(feat8, feat16, sem, set1, set2, cache)


def backbone_backward(fwd: Forward, params: dict, d_set1, d_set2=None, d_sem_logits=None) -> dict:
    """Parameter gradients given gradients on the head outputs."""
    grads = {}
    d8 = np.zeros(fwd.feat8.shape, np.float64)
    dx, grads["set1.w"], grads["set1.b"] = conv2d_backward(d_set1, fwd.feat16, params["set1.w"])
    d16 = dx
    if "set2.w" in params:
        if d_set2 is None:
            d_set2 = np.zeros_like(fwd.set2.maps)
        dx, grads["set2.w"], grads["set2.b"] = conv2d_backward(d_set2, fwd.feat8, params["set2.w"])
        d8 += dx
    if "sem.w" in params:
        if d_sem_logits is None:
            d_sem_logits = np.zeros_like(fwd.sem.scores)
        dx, grads["sem.w"], grads["sem.b"] = conv2d_backward(d_sem_logits, fwd.feat8, params["sem.w"])
        d8 += dx
    d = d16
    for name, x, pre, stride in reversed(fwd.cache):
        d = relu_backward(np.asarray(d, pre.dtype), pre)
        d, grads[f"{name}.w"], grads[f"{name}.b"] = conv2d_backward(d, x, params[f"{name}.w"], stride=stride, pad=1)
        if name == "stage16":
            d = d + d8
    return {k: np.asarray(v, params[k].dtype) for k, v in grads.items()}


# --------------------------------------------------------------------------
# per-ROI head
# --------------------------------------------------------------------------

@dataclass
class RoiHeadResult:
    roi: Roi
    scores: RoiScores
    lik1: RoiLikelihood
    lik: RoiLikelihood
    prior: np.ndarray | None
    post: RoiPosterior


def _as64(lik: RoiLikelihood) -> RoiLikelihood:
    return RoiLikelihood(np.asarray(lik.inside, np.float64), np.asarray(lik.outside, np.float64))


def roi_head(fwd: Forward, roi: Roi, cfg: TrainConfig, variant: VariantSpec | None = None) -> RoiHeadResult:
    """assemble -> fuse -> (prior crop, Bayesian product) -> mask and score. Runs in float64."""
    variant = variant or get_variant(cfg.variant)
    m1, m2 = cfg.roi_res
    lik1 = _as64(assemble(fwd.set1, roi, m1))
    if variant.use_fusion:
        fine = _as64(assemble(fwd.set2, roi, m2))
    else:
        fine = RoiLikelihood(np.zeros((lik1.inside.shape[0], m2, m2)), np.zeros((lik1.inside.shape[0], m2, m2)))
    lik = fuse(lik1, fine)
    prior = None
    if variant.use_prior_product:
        prior = np.asarray(crop_prior(fwd.sem, roi, m2), np.float64)
        post = bayes_combine(prior, lik)
    else:
        post = RoiPosterior(lik.inside, lik.outside)
    return RoiHeadResult(roi, mask_and_score(post), lik1, lik, prior, post)


@dataclass
class HeadGrads:
    """Float64 gradient accumulators on the head outputs of one image."""

    set1: np.ndarray
    set2: np.ndarray | None
    sem_probs: np.ndarray | None

    @classmethod
    def zeros(cls, fwd: Forward) -> "HeadGrads":
        return cls(
            np.zeros(fwd.set1.maps.shape),
            None if fwd.set2 is None else np.zeros(fwd.set2.maps.shape),
            None if fwd.sem is None else np.zeros(fwd.sem.probs.shape),
        )


def roi_head_backward(res: RoiHeadResult, fwd: Forward, acc: HeadGrads, d_fg=None, d_logits=None, d_scores=None):
    """Accumulate gradients of one ROI into ``acc``."""
    d_post = mask_and_score_backward(res.post, res.scores, d_fg=d_fg, d_logits=d_logits, d_scores=d_scores)
    if res.prior is not None:
        d_prior, d_lik = bayes_combine_backward(d_post, res.prior, res.lik)
        acc.sem_probs += crop_prior_backward(d_prior, fwd.sem.probs.shape, res.roi)
    else:
        d_lik = RoiLikelihood(d_post.inside, d_post.outside)
    d_coarse, d_fine = fuse_backward(d_lik)
    acc.set1 += assemble_backward(d_coarse, fwd.set1, res.roi)
    if acc.set2 is not None:
        acc.set2 += assemble_backward(d_fine, fwd.set2, res.roi)


def sem_logit_grad(fwd: Forward, d_probs: np.ndarray) -> np.ndarray:
    return softmax_channels_backward(d_probs, np.asarray(fwd.sem.probs, np.float64))
