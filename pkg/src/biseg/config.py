"""Experiment configuration dataclasses and JSON layering."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VariantSpec:
    name: str
    use_prior_product: bool
    use_semantic_head: bool
    use_fusion: bool


VARIANTS = {
    "fcis-star": VariantSpec("fcis-star", False, False, False),
    "naive-multitask": VariantSpec("naive-multitask", False, True, False),
    "biseg-single": VariantSpec("biseg-single", True, True, False),
    "biseg-fused": VariantSpec("biseg-fused", True, True, True),
}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class TrainConfig:
    num_categories: int = 3  # C, background excluded
    partitions: tuple[int, int] = (7, 9)
    roi_res: tuple[int, int] = (20, 40)
    rois_per_image: int = 16
    proposals_per_image: int = 64
    lr_schedule: list[tuple[int, float]] = field(default_factory=lambda: [(2000, 1e-3), (1000, 1e-4)])
    seed: int = 0
    positive_iou_threshold: float = 0.5
    # weights of (L_ss, L_cls, L_mask)
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # per-group multipliers on the SGD step, keyed by parameter-name prefix
    lr_mult: dict[str, float] = field(default_factory=dict)
    # linear ramp of the learning rate over the first iterations (0: off)
    warmup_iters: int = 0
    # rescale the joint gradient to at most this L2 norm (None: off)
    clip_grad_norm: float | None = None
    stride8_widths: tuple[int, ...] = (16, 32, 32, 32)
    stride16_width: int = 64
    variant: str = "biseg-fused"

    def __post_init__(self):
        self.partitions = tuple(int(k) for k in self.partitions)
        self.roi_res = tuple(int(m) for m in self.roi_res)
        self.lr_schedule = [(int(n), float(r)) for n, r in self.lr_schedule]
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.stride8_widths = tuple(int(w) for w in self.stride8_widths)
        self.lr_mult = {str(k): float(v) for k, v in dict(self.lr_mult).items()}
        if len(self.partitions) != 2 or min(self.partitions) < 1:
            raise ConfigError(f"partitions must be two integers >= 1, got {self.partitions}")
        if len(self.roi_res) != 2 or self.roi_res[1] != 2 * self.roi_res[0]:
            raise ConfigError(f"roi_res must satisfy M2 = 2*M1, got {self.roi_res}")
        if self.roi_res[0] < self.partitions[0] or self.roi_res[1] < self.partitions[1]:
            raise ConfigError(f"roi_res {self.roi_res} smaller than partitions {self.partitions}")
        if not 0.0 < self.positive_iou_threshold < 1.0:
            raise ConfigError(f"positive_iou_threshold must be in (0,1), got {self.positive_iou_threshold}")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights must have three entries (ss, cls, mask)")
        if len(self.stride8_widths) < 3:
            raise ConfigError("stride8_widths needs at least three layers to reach stride 8")
        if self.warmup_iters < 0:
            raise ConfigError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ConfigError(f"clip_grad_norm must be positive, got {self.clip_grad_norm}")
        get_variant(self.variant)

    @property
    def total_iterations(self) -> int:
        return sum(n for n, _ in self.lr_schedule)

    def mult_for(self, name: str) -> float:
        return self.lr_mult.get(name.split(".")[0], 1.0)

    def lr_at(self, iteration: int) -> float:
        rate = self.lr_schedule[-1][1]
        edge = 0
        for n, r in self.lr_schedule:
            edge += n
            if iteration < edge:
                rate = r
                break
        if iteration < self.warmup_iters:
            rate *= (iteration + 1) / self.warmup_iters
        return rate


@dataclass
class InferConfig:
    nms_iou: float = 0.3
    vote_iou: float = 0.5
    binarize_threshold: float = 0.5
    proposal_mode: str = "jitter-gt"
    proposal_count: int = 64
    render_min_score: float = 0.5


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return json.loads(json.dumps(d))


def from_dict(cls, data: dict, source: str = "config"):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {unknown} for {cls.__name__}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def layered(cls, path=None, section: str | None = None, overrides: dict | None = None):
    """defaults < JSON file (optionally one section of it) < explicit overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{p}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
        if section is not None and isinstance(raw.get(section), dict):
            raw = raw[section]
        elif section is not None:
            known = {f.name for f in dataclasses.fields(cls)}
            raw = {k: v for k, v in raw.items() if k in known}
        data.update(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return from_dict(cls, data, str(path) if path else "defaults")
