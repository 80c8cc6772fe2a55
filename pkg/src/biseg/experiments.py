"""Train / infer / evaluate helpers shared by the CLI and the scripts."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .config import InferConfig, TrainConfig
from .evaluation import EvalResult, evaluate
from .inference import ImageResult, propose, run_image
from .train import train_toy

log = logging.getLogger(__name__)

# stream tag mixed into inference-time rngs so they never coincide with training draws
_INFER_STREAM = 7919


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([_INFER_STREAM, seed, index])


def dataset_proposals(samples, icfg: InferConfig, seed: int, proposal_file=None):
    out = {}
    for i, s in enumerate(samples):
        out[s.id] = propose(
            icfg.proposal_mode,
            icfg.proposal_count,
            image_rng(seed, i),
            s.class_map.shape,
            gt_boxes=[ins.box for ins in s.instances],
            path=proposal_file,
            image_id=s.id,
        )
    return out


def infer_dataset(samples, params, cfg: TrainConfig, icfg: InferConfig, seed: int, proposals=None) -> dict[str, ImageResult]:
    proposals = proposals or dataset_proposals(samples, icfg, seed)
    return {s.id: run_image(s.image, proposals[s.id], params, cfg, icfg) for s in samples}


def evaluate_results(samples, results: dict[str, ImageResult], num_categories: int, thresholds=(0.5, 0.7)) -> EvalResult:
    preds = {sid: [(m.category, m.score, m.mask) for m in r.instances] for sid, r in results.items()}
    gts = {s.id: [(ins.category, ins.mask) for ins in s.instances] for s in samples}
    sem_pred = {sid: r.class_map for sid, r in results.items() if r.class_map is not None}
    sem_gt = {s.id: s.class_map for s in samples}
    return evaluate(
        preds,
        gts,
        num_categories,
        thresholds,
        semantic_pred=sem_pred or None,
        semantic_gt=sem_gt if sem_pred else None,
    )


@dataclass
class VariantRun:
    variant: str
    seed: int
    result: EvalResult
    params: dict
    final_loss: float


def run_variant(train_samples, test_samples, cfg: TrainConfig, icfg: InferConfig | None = None, seed: int | None = None) -> VariantRun:
    icfg = icfg or InferConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    params, rows = train_toy(train_samples, cfg)
    results = infer_dataset(test_samples, params, cfg, icfg, cfg.seed)
    ev = evaluate_results(test_samples, results, cfg.num_categories)
    tail = np.mean([r[-1] for r in rows[-100:]]) if rows else float("nan")
    log.info(
        "%s seed %d: mAP@0.5 %.4f mAP@0.7 %.4f meanIU %s",
        cfg.variant, cfg.seed, ev.map_r[0.5], ev.map_r[0.7], ev.mean_iu,
    )
    return VariantRun(cfg.variant, cfg.seed, ev, params, float(tail))


# --------------------------------------------------------------------------
# seeded ablation
# --------------------------------------------------------------------------

ABLATION_ORDER = ("biseg-fused", "biseg-single", "naive-multitask", "fcis-star")
# dataset seeds per experiment seed; train and test never share an rng stream
TRAIN_SEED_BASE, TEST_SEED_BASE = 1000, 2000


def default_splits(seed: int, n_train: int = 200, n_test: int = 100, synth_cfg=None):
    from .synth import generate_samples

    return (
        generate_samples(TRAIN_SEED_BASE + seed, n_train, synth_cfg),
        generate_samples(TEST_SEED_BASE + seed, n_test, synth_cfg),
    )


@dataclass
class AblationRow:
    variant: str
    seed: int
    map50: float
    map70: float
    mean_iu: float | None
    seconds: float


def run_ablation(cfg: TrainConfig, icfg: InferConfig, seeds, variants=ABLATION_ORDER, on_row=None) -> list[AblationRow]:
    import time

    rows = []
    for seed in seeds:
        train, test = default_splits(seed)
        for v in variants:
            t0 = time.perf_counter()
            run = run_variant(train, test, replace(cfg, variant=v), icfg, seed)
            row = AblationRow(v, seed, run.result.map_r[0.5], run.result.map_r[0.7], run.result.mean_iu,
                              time.perf_counter() - t0)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def seed_means(rows: list[AblationRow]) -> dict[str, dict[str, float]]:
    out = {}
    for v in dict.fromkeys(r.variant for r in rows):
        mine = [r for r in rows if r.variant == v]
        ius = [r.mean_iu for r in mine if r.mean_iu is not None]
        out[v] = {
            "map50": float(np.mean([r.map50 for r in mine])),
            "map70": float(np.mean([r.map70 for r in mine])),
            "mean_iu": float(np.mean(ius)) if ius else None,
        }
    return out
