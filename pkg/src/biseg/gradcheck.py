"""Central finite-difference checks of every hand-written backward pass.

Each scope builds random float64 inputs, a scalar loss (a random linear
functional of the op output, or the real losses for the composed scopes) and
the analytic gradient. Coordinates whose +h and -h evaluations fall on
different sides of a kink (ReLU or max branch) are skipped.

The relative error of a parameter group is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
checked coordinates of that group.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

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
from .config import TrainConfig, get_variant
from .losses import loss_cls, loss_mask, loss_ss
from .model import Forward, HeadGrads, backbone_forward, init_params, roi_head, roi_head_backward, sem_logit_grad
from .scoremaps import Roi, RoiLikelihood, ScoreMapSet, assemble, assemble_backward, fuse, fuse_backward
from .tensor import (
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
    softmax_channels,
    softmax_channels_backward,
    upsample_x2,
    upsample_x2_backward,
)
from .train import LabeledRoi, image_loss_and_grads

STEP = 1e-3


@dataclass
class Case:
    inputs: dict[str, np.ndarray]
    loss: Callable[[dict], tuple[float, object]]  # -> (value, kink signature)
    grads: Callable[[dict], dict[str, np.ndarray]]


@dataclass
class GradReport:
    scope: str
    trials: int
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0
    seconds: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def to_json(self) -> dict:
        return {
            "scope": self.scope,
            "trials": self.trials,
            "max_rel_err": dict(sorted(self.max_rel_err.items())),
            "checked_coordinates": self.checked,
            "skipped_kink_coordinates": self.skipped,
            "seconds": round(self.seconds, 3),
        }


def _roi_in(rng, size: int, min_side: float) -> Roi:
    w = rng.uniform(min_side, size)
    h = rng.uniform(min_side, size)
    x0 = rng.uniform(0, size - w)
    y0 = rng.uniform(0, size - h)
    return Roi(x0, y0, x0 + w, y0 + h)


def _same(a, b) -> bool:
    if a is None or b is None:
        return True
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------
# scopes
# --------------------------------------------------------------------------

def _conv2d_case(rng, trial):
    cin, h, w, cout, k, stride, pad = [(2, 5, 5, 3, 3, 1, 1), (3, 6, 7, 2, 3, 2, 1), (1, 4, 4, 2, 1, 1, 0)][trial % 3]
    x = rng.normal(size=(cin, h, w))
    wt = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    r = rng.normal(size=conv2d(x, wt, b, stride, pad).shape)

    def loss(p):
        return float((r * conv2d(p["x"], p["w"], p["b"], stride, pad)).sum()), None

    def grads(p):
        dx, dw, db = conv2d_backward(r, p["x"], p["w"], stride, pad)
        return {"x": dx, "w": dw, "b": db}

    return Case({"x": x, "w": wt, "b": b}, loss, grads)


def _relu_case(rng, trial):
    shape = [(2, 3, 3), (5,), (1, 4, 6)][trial % 3]
    x = rng.normal(size=shape)
    x = np.sign(x) * (0.05 + np.abs(x))
    r = rng.normal(size=shape)

    def loss(p):
        return float((r * relu(p["x"])).sum()), (p["x"] > 0,)

    return Case({"x": x}, loss, lambda p: {"x": relu_backward(r, p["x"])})


def _softmax_case(rng, trial):
    shape = [(3, 2, 2), (1, 3, 3), (4, 1, 5)][trial % 3]
    x = rng.normal(size=shape) * 2
    r = rng.normal(size=shape)

    def loss(p):
        return float((r * softmax_channels(p["x"])).sum()), None

    return Case({"x": x}, loss, lambda p: {"x": softmax_channels_backward(r, softmax_channels(p["x"]))})


def _upsample_case(rng, trial):
    shape = [(1, 3, 3), (2, 4, 5), (3, 1, 2)][trial % 3]
    x = rng.normal(size=shape)
    r = rng.normal(size=(shape[0], 2 * shape[1], 2 * shape[2]))

    def loss(p):
        return float((r * upsample_x2(p["x"])).sum()), None

    return Case({"x": x}, loss, lambda p: {"x": upsample_x2_backward(r)})


def _assemble_case(rng, trial):
    k, cp1, hf, m = [(1, 2, 3, 3), (2, 3, 4, 5), (3, 2, 5, 7)][trial % 3]
    stride = 8
    maps = rng.normal(size=(2 * k * k * cp1, hf, hf))
    roi = _roi_in(rng, hf * stride, stride)
    r_in = rng.normal(size=(cp1, m, m))
    r_out = rng.normal(size=(cp1, m, m))

    def loss(p):
        lik = assemble(ScoreMapSet(p["maps"], k, stride, cp1), roi, m)
        return float((r_in * lik.inside).sum() + (r_out * lik.outside).sum()), None

    def grads(p):
        return {"maps": assemble_backward(RoiLikelihood(r_in, r_out), ScoreMapSet(p["maps"], k, stride, cp1), roi)}

    return Case({"maps": maps}, loss, grads)


def _fuse_case(rng, trial):
    cp1, m = [(2, 2), (3, 3), (1, 5)][trial % 3]
    inputs = {
        "coarse_in": rng.normal(size=(cp1, m, m)),
        "coarse_out": rng.normal(size=(cp1, m, m)),
        "fine_in": rng.normal(size=(cp1, 2 * m, 2 * m)),
        "fine_out": rng.normal(size=(cp1, 2 * m, 2 * m)),
    }
    r_in = rng.normal(size=(cp1, 2 * m, 2 * m))
    r_out = rng.normal(size=(cp1, 2 * m, 2 * m))

    def loss(p):
        f = fuse(RoiLikelihood(p["coarse_in"], p["coarse_out"]), RoiLikelihood(p["fine_in"], p["fine_out"]))
        return float((r_in * f.inside).sum() + (r_out * f.outside).sum()), None

    def grads(p):
        dc, df = fuse_backward(RoiLikelihood(r_in, r_out))
        return {"coarse_in": dc.inside, "coarse_out": dc.outside, "fine_in": df.inside, "fine_out": df.outside}

    return Case(inputs, loss, grads)


def _crop_prior_case(rng, trial):
    cp1, hs, m = [(2, 3, 4), (3, 4, 6), (4, 2, 3)][trial % 3]
    probs = rng.uniform(0.05, 1.0, size=(cp1, hs, hs))
    roi = _roi_in(rng, hs * 8, 8)
    r = rng.normal(size=(cp1, m, m))

    def loss(p):
        return float((r * crop_prior(SemanticHeadOutput(None, p["probs"]), roi, m)).sum()), None

    return Case({"probs": probs}, loss, lambda p: {"probs": crop_prior_backward(r, p["probs"].shape, roi)})


def _bayes_case(rng, trial):
    cp1, m = [(2, 3), (3, 4), (4, 2)][trial % 3]
    inputs = {
        "prior": rng.uniform(0, 1, size=(cp1, m, m)),
        "lik_in": rng.normal(size=(cp1, m, m)),
        "lik_out": rng.normal(size=(cp1, m, m)),
    }
    r_in = rng.normal(size=(cp1, m, m))
    r_out = rng.normal(size=(cp1, m, m))

    def loss(p):
        post = bayes_combine(p["prior"], RoiLikelihood(p["lik_in"], p["lik_out"]))
        return float((r_in * post.inside).sum() + (r_out * post.outside).sum()), None

    def grads(p):
        d_prior, d_lik = bayes_combine_backward(RoiPosterior(r_in, r_out), p["prior"], RoiLikelihood(p["lik_in"], p["lik_out"]))
        return {"prior": d_prior, "lik_in": d_lik.inside, "lik_out": d_lik.outside}

    return Case(inputs, loss, grads)


def _mask_and_score_case(rng, trial):
    cp1, m = [(2, 4), (3, 3), (4, 2)][trial % 3]
    inputs = {"inside": rng.normal(size=(cp1, m, m)), "outside": rng.normal(size=(cp1, m, m))}
    r_fg = rng.normal(size=(cp1, m, m))
    r_sc = rng.normal(size=cp1)
    r_lg = rng.normal(size=cp1)

    def loss(p):
        s = mask_and_score(RoiPosterior(p["inside"], p["outside"]))
        value = (r_fg * s.fg_prob).sum() + (r_sc * s.class_scores).sum() + (r_lg * s.class_logits).sum()
        return float(value), (p["inside"] >= p["outside"],)

    def grads(p):
        post = RoiPosterior(p["inside"], p["outside"])
        d = mask_and_score_backward(post, mask_and_score(post), d_fg=r_fg, d_logits=r_lg, d_scores=r_sc)
        return {"inside": d.inside, "outside": d.outside}

    return Case(inputs, loss, grads)


def _loss_ss_case(rng, trial):
    cp1, h, w = [(4, 2, 2), (2, 3, 4), (3, 5, 1)][trial % 3]
    logits = rng.normal(size=(cp1, h, w)) * 2
    gt = rng.integers(0, cp1, size=(h, w))

    def loss(p):
        return loss_ss(SemanticHeadOutput.from_logits(p["logits"]), gt)[0], None

    return Case({"logits": logits}, loss, lambda p: {"logits": loss_ss(SemanticHeadOutput.from_logits(p["logits"]), gt)[1]})


def _loss_cls_case(rng, trial):
    cp1 = [4, 2, 6][trial % 3]
    logits = rng.normal(size=cp1) * 2
    label = int(rng.integers(0, cp1))

    def scores(p):
        return RoiScores(None, softmax_channels(p["logits"]), p["logits"])

    return Case(
        {"logits": logits},
        lambda p: (loss_cls(scores(p), label)[0], None),
        lambda p: {"logits": loss_cls(scores(p), label)[1]},
    )


def _loss_mask_case(rng, trial):
    m = [4, 3, 6][trial % 3]
    fg = rng.uniform(0.1, 0.9, size=(m, m))
    gt = (rng.random((m, m)) < 0.5).astype(np.float64)
    return Case(
        {"fg": fg},
        lambda p: (loss_mask(p["fg"], gt)[0], None),
        lambda p: {"fg": loss_mask(p["fg"], gt)[1]},
    )


def _full_head_case(rng, trial):
    """set maps + semantic logits -> assemble, fuse, prior crop, product, score, L_cls + L_mask."""
    cp1, (k1, k2), (m1, m2) = [(3, (2, 3), (4, 8)), (2, (1, 2), (3, 6)), (4, (2, 2), (2, 4))][trial % 3]
    size = 64
    cfg = TrainConfig(num_categories=cp1 - 1, partitions=(k1, k2), roi_res=(m1, m2))
    variant = get_variant("biseg-fused")
    inputs = {
        "set1": rng.normal(size=(2 * k1 * k1 * cp1, size // 16, size // 16)),
        "set2": rng.normal(size=(2 * k2 * k2 * cp1, size // 8, size // 8)),
        "sem_logits": rng.normal(size=(cp1, size // 8, size // 8)),
    }
    rois = [_roi_in(rng, size, 16) for _ in range(2)]
    labels = [int(rng.integers(1, cp1)), 0]
    masks = [(rng.random((m2, m2)) < 0.5).astype(np.float64), None]

    def forward(p):
        sem = SemanticHeadOutput.from_logits(p["sem_logits"])
        return Forward(None, None, sem, ScoreMapSet(p["set1"], k1, 16, cp1), ScoreMapSet(p["set2"], k2, 8, cp1))

    def loss(p):
        fwd = forward(p)
        total, sig = 0.0, []
        for roi, label, mask in zip(rois, labels, masks):
            res = roi_head(fwd, roi, cfg, variant)
            total += loss_cls(res.scores, label)[0]
            if label:
                total += loss_mask(res.scores.fg_prob[label], mask)[0]
            sig.append(res.post.inside >= res.post.outside)
        return total, tuple(sig)

    def grads(p):
        fwd = forward(p)
        acc = HeadGrads.zeros(fwd)
        for roi, label, mask in zip(rois, labels, masks):
            res = roi_head(fwd, roi, cfg, variant)
            _, d_logits = loss_cls(res.scores, label)
            d_fg = None
            if label:
                d_fg = np.zeros_like(res.scores.fg_prob)
                d_fg[label] = loss_mask(res.scores.fg_prob[label], mask)[1]
            roi_head_backward(res, fwd, acc, d_fg=d_fg, d_logits=d_logits)
        return {"set1": acc.set1, "set2": acc.set2, "sem_logits": sem_logit_grad(fwd, acc.sem_probs)}

    return Case(inputs, loss, grads)


def _model_case(rng, trial):
    """Whole network: backbone, all heads, L_ss + L_cls + L_mask."""
    variant = ["biseg-fused", "biseg-single", "naive-multitask"][trial % 3]
    cfg = TrainConfig(
        num_categories=2,
        partitions=(2, 2),
        roi_res=(4, 8),
        stride8_widths=(4, 4, 4),
        stride16_width=4,
        variant=variant,
    )
    size = 32
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, rng).items()}
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    image = rng.uniform(0, 1, size=(3, size, size))
    class_map = rng.integers(0, 3, size=(size, size))
    labeled = [
        LabeledRoi(_roi_in(rng, size, 16), 1, (rng.random((8, 8)) < 0.5).astype(np.float64), 0),
        LabeledRoi(_roi_in(rng, size, 16), 0, None, None),
    ]

    def loss(p):
        value = image_loss_and_grads(p, image, class_map, labeled, cfg)[0].total
        fwd = backbone_forward(image, p, cfg)
        sig = [pre > 0 for _, _, pre, _ in fwd.cache]
        for r in labeled:
            post = roi_head(fwd, r.roi, cfg).post
            sig.append(post.inside >= post.outside)
        return value, tuple(sig)

    return Case(params, loss, lambda p: image_loss_and_grads(p, image, class_map, labeled, cfg)[1])


SCOPES: dict[str, Callable] = {
    "conv2d": _conv2d_case,
    "relu": _relu_case,
    "softmax_channels": _softmax_case,
    "upsample_x2": _upsample_case,
    "assemble": _assemble_case,
    "fuse": _fuse_case,
    "crop_prior": _crop_prior_case,
    "bayes_combine": _bayes_case,
    "mask_and_score": _mask_and_score_case,
    "loss_ss": _loss_ss_case,
    "loss_cls": _loss_cls_case,
    "loss_mask": _loss_mask_case,
    "full-head": _full_head_case,
    "model": _model_case,
}


def _pick_coords(analytic: np.ndarray, rng, max_coords: int) -> np.ndarray:
    flat = analytic.reshape(-1)
    if flat.size <= max_coords:
        return np.arange(flat.size)
    nz = np.flatnonzero(flat)
    z = np.flatnonzero(flat == 0)
    take_nz = rng.choice(nz, size=min(len(nz), max_coords), replace=False) if len(nz) else nz
    take_z = rng.choice(z, size=min(len(z), max_coords // 4), replace=False) if len(z) else z
    return np.sort(np.concatenate([take_nz, take_z]))


# the whole-network scope re-runs a full forward per coordinate
_COORD_BUDGET = {"model": 25}


def grad_check(scope: str, trials: int = 10, seed: int = 0, step: float = STEP, max_coords: int | None = None) -> GradReport:
    if scope not in SCOPES:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SCOPES)}")
    if max_coords is None:
        max_coords = _COORD_BUDGET.get(scope, 200)
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradReport(scope, trials)
    for trial in range(trials):
        case = SCOPES[scope](rng, trial)
        inputs = {k: np.array(v, dtype=np.float64) for k, v in case.inputs.items()}
        analytic = case.grads(inputs)
        for name in sorted(inputs):
            a_full = np.asarray(analytic[name], np.float64)
            coords = _pick_coords(a_full, rng, max_coords)
            x = inputs[name].reshape(-1)
            num, ana = [], []
            for c in coords:
                orig = x[c]
                x[c] = orig + step
                fp, sp = case.loss(inputs)
                x[c] = orig - step
                fm, sm = case.loss(inputs)
                x[c] = orig
                if not _same(sp, sm):
                    report.skipped += 1
                    continue
                num.append((fp - fm) / (2 * step))
                ana.append(a_full.reshape(-1)[c])
            report.checked += len(num)
            if not num:
                continue
            num_a, ana_a = np.array(num), np.array(ana)
            scale = max(np.abs(a_full).max(), np.abs(num_a).max())
            err = 0.0 if scale == 0 else float(np.abs(num_a - ana_a).max() / scale)
            report.max_rel_err[name] = max(report.max_rel_err.get(name, 0.0), err)
    report.seconds = time.perf_counter() - t0
    return report
