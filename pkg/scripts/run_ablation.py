"""Train and evaluate the four ablation variants over several seeds.

Writes per-run rows and seed means to ``--out`` (CSV + JSON) and prints the
mAP^r table. Defaults match the toy-scale setting: 200 train / 100 test
images per seed, 3000 iterations.

    python scripts/run_ablation.py --config configs/ablation.json --seeds 0 1 2 --out runs/ablation
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

from biseg.config import InferConfig, TrainConfig, layered, to_dict
from biseg.evaluation import format_table
from biseg.experiments import ABLATION_ORDER, run_ablation, seed_means


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "ablation.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(ABLATION_ORDER))
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = layered(TrainConfig, args.config, "train")
    icfg = layered(InferConfig, args.config, "infer")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(
        json.dumps({"train": to_dict(cfg), "infer": to_dict(icfg), "seeds": args.seeds}, indent=1, sort_keys=True)
    )

    t0 = time.perf_counter()
    rows = run_ablation(
        cfg, icfg, args.seeds, args.variants,
        on_row=lambda r: print(f"{r.variant:<16} seed {r.seed}  mAP@0.5 {r.map50:.4f}  mAP@0.7 {r.map70:.4f}"
                               f"  meanIU {r.mean_iu if r.mean_iu is None else round(r.mean_iu, 4)}  {r.seconds:.0f}s",
                               flush=True),
    )
    with (args.out / "runs.csv").open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])))
        wr.writeheader()
        wr.writerows(asdict(r) for r in rows)
    means = seed_means(rows)
    (args.out / "summary.json").write_text(json.dumps(means, indent=1, sort_keys=True))
    print(format_table([(v, m["map50"], m["map70"]) for v, m in means.items()]))
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
