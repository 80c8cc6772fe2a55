"""Partition-count sweep for biseg-fused over (k1, k2) pairs.

Generates the default train/test split for ``--seed`` and writes
``sweep.csv`` with columns k1,k2,mAPr05,mAPr07.

    python scripts/run_sweep.py --pairs 7,7 7,9 7,11 --out runs/sweep
"""
from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path

from biseg.cli import parse_pair, sweep_rows
from biseg.config import InferConfig, TrainConfig, layered
from biseg.evaluation import format_table
from biseg.experiments import default_splits


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "ablation.json")
    p.add_argument("--pairs", type=parse_pair, nargs="+", default=[(7, 7), (7, 9), (7, 11)])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = layered(TrainConfig, args.config, "train")
    icfg = layered(InferConfig, args.config, "infer")
    train, test = default_splits(args.seed)
    rows = sweep_rows(train, test, cfg, icfg, args.pairs, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "sweep.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k1", "k2", "mAPr05", "mAPr07"])
        wr.writerows([k1, k2, f"{a:.6f}", f"{b:.6f}"] for k1, k2, a, b in rows)
    print(format_table([(f"({k1},{k2})", a, b) for k1, k2, a, b in rows]))


if __name__ == "__main__":
    main()
