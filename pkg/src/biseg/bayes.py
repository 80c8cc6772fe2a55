"""Semantic prior x instance likelihood, then per-ROI foreground mask and class score.

The posterior inside map for category c is the semantic probability of c
times the assembled inside likelihood of c. The joint with any other category
is zero by construction, so the sum over categories collapses to that single
product. Outside maps pass through unchanged since nothing acts as a prior
for them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scoremaps import Roi, RoiLikelihood, project_roi, sample_positions
from .tensor import ShapeError, Tensor, require_same_shape, softmax_channels, softmax_channels_backward

SEMANTIC_STRIDE = 8


@dataclass
class SemanticHeadOutput:
    scores: Tensor  # raw logits [C+1, Hs, Ws]
    probs: Tensor

    @classmethod
    def from_logits(cls, scores: Tensor) -> "SemanticHeadOutput":
        return cls(scores=scores, probs=softmax_channels(scores))


@dataclass
class RoiPosterior:
    inside: Tensor
    outside: Tensor


@dataclass
class RoiScores:
    fg_prob: Tensor  # [C+1, M, M]
    class_scores: Tensor  # [C+1]
    class_logits: Tensor  # [C+1]


def crop_index(probs_shape, roi: Roi, out_res: int, stride: int = SEMANTIC_STRIDE) -> np.ndarray:
    c, hs, ws = probs_shape
    fx0, fy0, fx1, fy1 = project_roi(roi, stride)
    if fx1 <= fx0 or fy1 <= fy0:
        raise ShapeError(f"crop_prior: degenerate ROI {roi.box()}")
    rows = sample_positions(fy0, fy1, out_res, hs)
    cols = sample_positions(fx0, fx1, out_res, ws)
    return (np.arange(c)[:, None, None] * hs + rows[None, :, None]) * ws + cols[None, None, :]


def crop_prior(sem: SemanticHeadOutput, roi: Roi, out_res: int, stride: int = SEMANTIC_STRIDE) -> Tensor:
    """Nearest-neighbour crop-and-resize of the class probabilities to [C+1, M, M]."""
    idx = crop_index(sem.probs.shape, roi, out_res, stride)
    return sem.probs.reshape(-1)[idx]


def crop_prior_backward(d_prior: Tensor, probs_shape, roi: Roi, stride: int = SEMANTIC_STRIDE) -> Tensor:
    idx = crop_index(probs_shape, roi, d_prior.shape[-1], stride)
    size = int(np.prod(probs_shape))
    flat = np.bincount(idx.reshape(-1), weights=np.asarray(d_prior, np.float64).reshape(-1), minlength=size)
    return flat.reshape(probs_shape).astype(d_prior.dtype)


def bayes_combine(prior: Tensor, lik: RoiLikelihood) -> RoiPosterior:
    require_same_shape("bayes_combine prior/likelihood", prior, lik.inside)
    return RoiPosterior(inside=prior * lik.inside, outside=lik.outside)


def bayes_combine_backward(d_post: RoiPosterior, prior: Tensor, lik: RoiLikelihood):
    """Return ``(d_prior, d_likelihood)``."""
    require_same_shape("bayes_combine_backward", d_post.inside, prior)
    d_prior = d_post.inside * lik.inside
    d_lik = RoiLikelihood(inside=d_post.inside * prior, outside=d_post.outside)
    return d_prior, d_lik


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mask_and_score(post: RoiPosterior) -> RoiScores:
    """Two-way softmax per pixel for the mask; max then mean-pool for the class logits."""
    require_same_shape("mask_and_score", post.inside, post.outside)
    inside = np.asarray(post.inside, np.float64)
    outside = np.asarray(post.outside, np.float64)
    fg = _sigmoid(inside - outside)
    per_pixel = np.where(inside >= outside, inside, outside)
    logits = per_pixel.mean(axis=(1, 2))
    dtype = post.inside.dtype
    return RoiScores(
        fg_prob=fg.astype(dtype),
        class_scores=softmax_channels(logits).astype(dtype),
        class_logits=logits.astype(dtype),
    )


def mask_and_score_backward(post: RoiPosterior, scores: RoiScores, d_fg=None, d_logits=None, d_scores=None):
    """Gradient w.r.t. the posterior. Max ties route to the inside branch."""
    inside = np.asarray(post.inside, np.float64)
    outside = np.asarray(post.outside, np.float64)
    c, m, _ = inside.shape
    g_logits = np.zeros(c) if d_logits is None else np.asarray(d_logits, np.float64).copy()
    if d_scores is not None:
        g_logits += softmax_channels_backward(
            np.asarray(d_scores, np.float64), np.asarray(scores.class_scores, np.float64)
        )
    d_in = np.zeros_like(inside)
    d_out = np.zeros_like(outside)
    if d_fg is not None:
        fg = _sigmoid(inside - outside)
        g = np.asarray(d_fg, np.float64) * fg * (1.0 - fg)
        d_in += g
        d_out -= g
    g_pix = np.broadcast_to((g_logits / (m * m))[:, None, None], inside.shape)
    take_inside = inside >= outside
    d_in += np.where(take_inside, g_pix, 0.0)
    d_out += np.where(take_inside, 0.0, g_pix)
    dtype = post.inside.dtype
    return RoiPosterior(inside=d_in.astype(dtype), outside=d_out.astype(dtype))
