"""Position-sensitive score maps: ROI projection, assembling and two-set fusion."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor, load_tensor, save_tensor, upsample_x2, upsample_x2_backward

OUTSIDE, INSIDE = 0, 1


@dataclass(frozen=True)
class Roi:
    """Axis-aligned box in image pixel coordinates (pixel i spans [i, i+1))."""

    x0: float
    y0: float
    x1: float
    y1: float
    objectness: float = 1.0

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def box(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def clip(self, height: int, width: int) -> "Roi":
        return Roi(
            min(max(self.x0, 0.0), width),
            min(max(self.y0, 0.0), height),
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            self.objectness,
        )


@dataclass
class ScoreMapSet:
    """2*k*k*(C+1) maps; channel = (cell * 2 + side) * (C+1) + category."""

    maps: Tensor
    k: int
    stride: int
    num_categories: int  # C+1, background included

    def __post_init__(self):
        if self.maps.ndim != 3:
            raise ShapeError(f"score maps must be [channels, H, W], got {self.maps.shape}")
        expected = 2 * self.k * self.k * self.num_categories
        if self.maps.shape[0] != expected:
            raise ShapeError(
                f"score map set with k={self.k}, C+1={self.num_categories} needs {expected} "
                f"channels, got {self.maps.shape[0]}"
            )

    @staticmethod
    def channel(cell: int, side: int, category: int, num_categories: int) -> int:
        return (cell * 2 + side) * num_categories + category


@dataclass
class RoiLikelihood:
    inside: Tensor
    outside: Tensor

    def __post_init__(self):
        if self.inside.shape != self.outside.shape:
            raise ShapeError(f"inside {self.inside.shape} != outside {self.outside.shape}")

    @property
    def resolution(self) -> int:
        return self.inside.shape[-1]


def project_roi(roi: Roi, stride: int) -> tuple[float, float, float, float]:
    """Continuous feature-space box; no rounding."""
    return (roi.x0 / stride, roi.y0 / stride, roi.x1 / stride, roi.y1 / stride)


def roi_is_valid(roi: Roi, stride: int = 16) -> bool:
    fx0, fy0, fx1, fy1 = project_roi(roi, stride)
    return (fx1 - fx0) >= 1.0 and (fy1 - fy0) >= 1.0


def filter_rois(rois, height: int, width: int, stride: int = 16):
    """Clip to the image and drop boxes spanning < 1 feature pixel per axis.

    Returns ``(kept, n_discarded)``.
    """
    kept, dropped = [], 0
    for roi in rois:
        c = roi.clip(height, width)
        if roi_is_valid(c, stride):
            kept.append(c)
        else:
            dropped += 1
    return kept, dropped


def sample_positions(lo: float, hi: float, out_res: int, size: int) -> np.ndarray:
    """Nearest feature index for each of ``out_res`` pixel-centre samples in [lo, hi)."""
    rel = (np.arange(out_res, dtype=np.float64) + 0.5) / out_res
    pos = np.floor(lo + rel * (hi - lo)).astype(np.int64)
    np.clip(pos, 0, size - 1, out=pos)
    return pos


@lru_cache(maxsize=64)
def _channel_offsets(k: int, out_res: int, num_categories: int, plane: int) -> np.ndarray:
    """Flat offset of the channel read by every (side, category, row, col) output."""
    cell_1d = (np.arange(out_res) * k) // out_res  # floor partition rule
    cell = cell_1d[:, None] * k + cell_1d[None, :]
    side = np.arange(2)[:, None, None, None]
    cat = np.arange(num_categories)[None, :, None, None]
    off = ((cell[None, None] * 2 + side) * num_categories + cat) * plane
    off.setflags(write=False)
    return off


def assemble_index(maps_shape, k: int, stride: int, num_categories: int, roi: Roi, out_res: int):
    """Flat gather indices of shape [2, C+1, M, M] (side, category, row, col)."""
    if out_res < k:
        raise ShapeError(f"assemble: output resolution {out_res} smaller than partitions k={k}")
    _, hf, wf = maps_shape
    fx0, fy0, fx1, fy1 = project_roi(roi, stride)
    if fx1 <= fx0 or fy1 <= fy0:
        raise ShapeError(f"assemble: degenerate ROI {roi.box()}")
    rows = sample_positions(fy0, fy1, out_res, hf)
    cols = sample_positions(fx0, fx1, out_res, wf)
    return _channel_offsets(k, out_res, num_categories, hf * wf) + (rows[:, None] * wf + cols[None, :])


def assemble(sms: ScoreMapSet, roi: Roi, out_res: int) -> RoiLikelihood:
    idx = assemble_index(sms.maps.shape, sms.k, sms.stride, sms.num_categories, roi, out_res)
    g = sms.maps.reshape(-1)[idx]
    return RoiLikelihood(inside=g[INSIDE], outside=g[OUTSIDE])


def assemble_backward(d_lik: RoiLikelihood, sms: ScoreMapSet, roi: Roi) -> Tensor:
    """Scatter ROI likelihood gradients back onto the score maps."""
    out_res = d_lik.resolution
    idx = assemble_index(sms.maps.shape, sms.k, sms.stride, sms.num_categories, roi, out_res)
    grad = np.empty((2,) + d_lik.inside.shape, dtype=np.float64)
    grad[INSIDE] = d_lik.inside
    grad[OUTSIDE] = d_lik.outside
    flat = np.bincount(idx.reshape(-1), weights=grad.reshape(-1), minlength=sms.maps.size)
    return flat.reshape(sms.maps.shape).astype(d_lik.inside.dtype)


def fuse(coarse: RoiLikelihood, fine: RoiLikelihood) -> RoiLikelihood:
    """Upsample the coarse likelihood x2 and add the fine one (unweighted)."""
    if fine.resolution != 2 * coarse.resolution:
        raise ShapeError(
            f"fuse: fine resolution {fine.resolution} != 2 x coarse resolution {coarse.resolution}"
        )
    if fine.inside.shape[0] != coarse.inside.shape[0]:
        raise ShapeError("fuse: category counts differ")
    return RoiLikelihood(
        inside=upsample_x2(coarse.inside) + fine.inside,
        outside=upsample_x2(coarse.outside) + fine.outside,
    )


def fuse_backward(d_out: RoiLikelihood) -> tuple[RoiLikelihood, RoiLikelihood]:
    d_coarse = RoiLikelihood(upsample_x2_backward(d_out.inside), upsample_x2_backward(d_out.outside))
    return d_coarse, d_out


def save_score_map_set(path, sms: ScoreMapSet) -> None:
    path = Path(path)
    save_tensor(path, sms.maps)
    sidecar = {"k": sms.k, "stride": sms.stride, "num_categories": sms.num_categories}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_score_map_set(path) -> ScoreMapSet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return ScoreMapSet(load_tensor(path), int(meta["k"]), int(meta["stride"]), int(meta["num_categories"]))
