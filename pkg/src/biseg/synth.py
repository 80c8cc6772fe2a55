"""Deterministic synthetic-shapes instance segmentation dataset.

Each image holds a few coloured disks, squares and triangles on a noisy
textured background. Later shapes occlude earlier ones; instance masks are the
visible regions. Colours per category overlap, so colour alone is an
informative but imperfect cue.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pnm import read_pnm, write_pnm

CATEGORY_NAMES = ("background", "disk", "square", "triangle")

# mean RGB per object category
_CATEGORY_COLORS = {
    1: (0.80, 0.40, 0.35),
    2: (0.40, 0.75, 0.40),
    3: (0.40, 0.45, 0.80),
}


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    min_instances: int = 1
    max_instances: int = 4
    min_size: int = 18
    max_size: int = 34
    occlusion: bool = True
    # probability that a new shape is placed next to an existing one
    cluster_prob: float = 0.5
    color_jitter: float = 0.22
    pixel_noise: float = 0.08
    min_visible: int = 16

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError(f"image size {self.height}x{self.width} must be a multiple of 16")


@dataclass
class Instance:
    category: int
    mask: np.ndarray  # bool [H, W]
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (x1, y1 exclusive)


@dataclass
class DatasetSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    instances: list[Instance]
    class_map: np.ndarray  # int64 [H, W]
    id: str
    draw_order: list[int] = field(default_factory=list)


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _shape_mask(category: int, cx: float, cy: float, size: float, flip: bool, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    half = size / 2
    if category == 1:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if category == 2:
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # isosceles triangle, apex up (or down when flipped)
    t = (yy - (cy - half)) / size
    if flip:
        t = 1.0 - t
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half * t)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.65, size=(3, 1, 1))
    coarse = rng.normal(0.0, 0.12, size=(3, h // 8 + 1, w // 8 + 1))
    texture = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)[:, :h, :w]
    return base + texture


def _place(rng, cfg: SynthConfig, existing: list[tuple]):
    size = rng.uniform(cfg.min_size, cfg.max_size)
    half = size / 2
    if existing and cfg.occlusion and rng.random() < cfg.cluster_prob:
        _, ocx, ocy, osize, _ = existing[rng.integers(len(existing))]
        cx = ocx + rng.uniform(-0.6, 0.6) * osize
        cy = ocy + rng.uniform(-0.6, 0.6) * osize
    else:
        cx = rng.uniform(half, cfg.width - half)
        cy = rng.uniform(half, cfg.height - half)
    cx = float(np.clip(cx, half, cfg.width - half))
    cy = float(np.clip(cy, half, cfg.height - half))
    category = int(rng.integers(1, len(CATEGORY_NAMES)))
    return (category, cx, cy, size, bool(rng.random() < 0.5))


def generate_sample(seed: int, index: int, cfg: SynthConfig) -> DatasetSample:
    rng = np.random.default_rng([seed, index])
    h, w = cfg.height, cfg.width
    n_target = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    shapes: list[tuple] = []
    full_masks: list[np.ndarray] = []
    owner = np.zeros((h, w), dtype=np.int64)  # 1-based index into shapes, topmost wins
    for _ in range(n_target):
        for _attempt in range(20):
            spec = _place(rng, cfg, shapes)
            m = _shape_mask(spec[0], spec[1], spec[2], spec[3], spec[4], h, w)
            if not cfg.occlusion and np.any(m & (owner > 0)):
                continue
            trial = owner.copy()
            trial[m] = len(shapes) + 1
            counts = np.bincount(trial.ravel(), minlength=len(shapes) + 2)[1:]
            areas = [fm.sum() for fm in full_masks] + [m.sum()]
            if all(c >= max(cfg.min_visible, 0.25 * a) for c, a in zip(counts, areas)):
                shapes.append(spec)
                full_masks.append(m)
                owner = trial
                break

    image = _background(rng, h, w)
    class_map = np.zeros((h, w), dtype=np.int64)
    for i, (category, *_rest) in enumerate(shapes):
        color = np.asarray(_CATEGORY_COLORS[category]) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        vis = owner == i + 1
        image[:, vis] = color[:, None]
        class_map[vis] = category
    image = image + rng.normal(0.0, cfg.pixel_noise, size=image.shape)
    # quantise so the in-memory sample equals what is written to disk
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    instances = []
    for i, (category, *_rest) in enumerate(shapes):
        vis = owner == i + 1
        instances.append(Instance(category=category, mask=vis, box=tight_box(vis)))
    return DatasetSample(
        image=image.astype(np.float32),
        instances=instances,
        class_map=class_map,
        id=f"{index:05d}",
        draw_order=list(range(len(instances))),
    )


def generate_samples(seed: int, n_images: int, cfg: SynthConfig | None = None) -> list[DatasetSample]:
    cfg = cfg or SynthConfig()
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    return [generate_sample(seed, i, cfg) for i in range(n_images)]


def write_sample(root: Path, s: DatasetSample) -> None:
    h, w = s.class_map.shape
    rgb = np.round(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    write_pnm(root / "images" / f"{s.id}.ppm", rgb)
    inst = np.zeros((h, w), dtype=np.uint16)
    for ordinal, ins in enumerate(s.instances, start=1):
        inst[ins.mask] = ordinal
    write_pnm(root / "instances" / f"{s.id}.pgm", inst)
    write_pnm(root / "classes" / f"{s.id}.pgm", s.class_map.astype(np.uint8))
    meta = {
        "instances": [
            {"ordinal": o, "category": ins.category, "box": list(ins.box)}
            for o, ins in enumerate(s.instances, start=1)
        ]
    }
    (root / "meta" / f"{s.id}.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def generate(seed: int, n_images: int, out_dir, cfg: SynthConfig | None = None) -> list[DatasetSample]:
    """Generate a dataset and write it to ``out_dir``; returns the samples."""
    cfg = cfg or SynthConfig()
    root = Path(out_dir)
    for sub in ("images", "instances", "classes", "meta"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    samples = generate_samples(seed, n_images, cfg)
    for s in samples:
        write_sample(root, s)
    manifest = {
        "ids": [s.id for s in samples],
        "config": asdict(cfg),
        "seed": seed,
        "categories": list(CATEGORY_NAMES),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return samples


def load_sample(root, sample_id: str) -> DatasetSample:
    root = Path(root)
    rgb = read_pnm(root / "images" / f"{sample_id}.ppm")
    inst = read_pnm(root / "instances" / f"{sample_id}.pgm").astype(np.int64)
    classes = read_pnm(root / "classes" / f"{sample_id}.pgm").astype(np.int64)
    meta = json.loads((root / "meta" / f"{sample_id}.json").read_text())
    instances = []
    for rec in meta["instances"]:
        mask = inst == rec["ordinal"]
        instances.append(Instance(category=int(rec["category"]), mask=mask, box=tuple(rec["box"])))
    image = (rgb.astype(np.float64) / 255.0).astype(np.float32).transpose(2, 0, 1)
    return DatasetSample(np.ascontiguousarray(image), instances, classes, sample_id, list(range(len(instances))))


def load_dataset(root) -> list[DatasetSample]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path}: dataset manifest not found")
    manifest = json.loads(manifest_path.read_text())
    return [load_sample(root, i) for i in manifest["ids"]]
