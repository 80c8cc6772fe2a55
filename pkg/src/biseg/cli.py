"""Command-line entry point: gen, train, infer, eval, gradcheck, sweep, render."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, InferConfig, TrainConfig, VARIANTS, layered, to_dict
from .evaluation import evaluate, format_table
from .experiments import dataset_proposals, evaluate_results, infer_dataset
from .gradcheck import SCOPES, grad_check
from .pnm import PnmError, read_pnm, write_pnm
from .synth import CATEGORY_NAMES, SynthConfig, generate, load_dataset
from .tensor import TensorFormatError, load_tensor, save_tensor
from .train import NumericalError, load_checkpoint, save_checkpoint, train_toy

log = logging.getLogger("biseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# instance overlay palette; semantic overlays reuse the first C+1 entries
_PALETTE = np.array(
    [
        (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    ],
    dtype=np.uint8,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def parse_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected k1,k2 (e.g. 7,9), got {text!r}") from None
    return a, b


def _floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0.0 < v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return vals


def with_iterations(cfg: TrainConfig, iters: int) -> TrainConfig:
    """Rescale the schedule to ``iters`` steps while keeping the stage proportions."""
    if iters < 1:
        raise UsageError(f"--iters must be >= 1, got {iters}")
    total = cfg.total_iterations
    stages, used = [], 0
    for i, (n, rate) in enumerate(cfg.lr_schedule):
        if i == len(cfg.lr_schedule) - 1:
            m = iters - used
        else:
            m = int(round(iters * n / total))
        used += m
        if m > 0:
            stages.append((m, rate))
    return replace(cfg, lr_schedule=stages)


def _train_config(args, **extra) -> TrainConfig:
    overrides = {"seed": args.seed, **extra}
    cfg = layered(TrainConfig, args.config, "train", overrides)
    if getattr(args, "iters", None) is not None:
        cfg = with_iterations(cfg, args.iters)
    return cfg


def _infer_config(args) -> InferConfig:
    return layered(InferConfig, args.config, "infer")


def _echo(out: Path, **sections) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {k: (to_dict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in sections.items()}
    (out / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=1))


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def _load_data(path) -> list:
    if path is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(path)
    except (FileNotFoundError, PnmError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot load dataset ({exc})") from exc


# --------------------------------------------------------------------------
# prediction directories
# --------------------------------------------------------------------------

def write_predictions(out: Path, results: dict, shapes: dict[str, tuple]) -> None:
    """Per-image instance map, detection list, class map and full-resolution masks."""
    for sub in ("instances", "detections", "classes", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for sid in sorted(results):
        r = results[sid]
        shape = shapes[sid]
        inst_map = np.zeros(shape, np.uint16)
        # ascending score: higher-scoring instances are painted last and win overlaps
        for ordinal in sorted(range(len(r.instances)), key=lambda i: (r.instances[i].score, -i)):
            inst_map[r.instances[ordinal].mask] = ordinal + 1
        write_pnm(out / "instances" / f"{sid}.pgm", inst_map)
        dets = [
            {"category": m.category, "score": m.score, "box": list(m.box.box()) if m.box else None}
            for m in r.instances
        ]
        (out / "detections" / f"{sid}.json").write_text(json.dumps(dets, indent=1))
        if r.class_map is not None:
            write_pnm(out / "classes" / f"{sid}.pgm", r.class_map.astype(np.uint8))
        stack = np.stack([m.mask for m in r.instances]) if r.instances else np.zeros((0,) + tuple(shape))
        save_tensor(out / "masks" / f"{sid}.ten", stack.astype(np.float32))


def read_predictions(pred: Path, ids: list[str], shapes: dict[str, tuple]):
    """Load ``(category, score, mask)`` lists; prefers masks/*.ten over the instance map."""
    preds, sem = {}, {}
    for sid in ids:
        det_path = pred / "detections" / f"{sid}.json"
        if not det_path.exists():
            raise DataError(f"{det_path}: missing detections for image {sid}")
        try:
            dets = json.loads(det_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{det_path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
        mask_path = pred / "masks" / f"{sid}.ten"
        if mask_path.exists():
            stack = load_tensor(mask_path) > 0.5
        else:
            inst = read_pnm(pred / "instances" / f"{sid}.pgm").astype(np.int64)
            stack = np.stack([inst == i + 1 for i in range(len(dets))]) if dets else np.zeros((0,) + inst.shape, bool)
        if len(stack) != len(dets):
            raise DataError(f"{mask_path}: {len(stack)} masks but {len(dets)} detections")
        if len(stack) and stack.shape[1:] != shapes[sid]:
            raise DataError(f"{mask_path}: mask shape {stack.shape[1:]} differs from image {shapes[sid]}")
        preds[sid] = [(int(d["category"]), float(d["score"]), stack[i]) for i, d in enumerate(dets)]
        cls_path = pred / "classes" / f"{sid}.pgm"
        if cls_path.exists():
            sem[sid] = read_pnm(cls_path).astype(np.int64)
    return preds, sem


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = _require_out(args)
    cfg = layered(SynthConfig, args.config, "synth")
    generate(args.seed, args.n, out, cfg)
    _echo(out, synth=cfg, seed=args.seed, n=args.n)
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _require_out(args)
    cfg = _train_config(args, variant=args.variant)
    samples = _load_data(args.data)
    _echo(out, train=cfg, data=str(args.data))
    params, rows = train_toy(samples, cfg, log_path=out / "train_log.csv", progress_every=args.progress)
    save_checkpoint(out, params, cfg)
    tail = np.mean([r[-1] for r in rows[-50:]])
    print(f"{cfg.variant}: {cfg.total_iterations} iterations, final loss {tail:.4f}, checkpoint in {out}")
    return EXIT_OK


def _load_ckpt(path):
    if path is None:
        raise UsageError("--ckpt is required")
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, TensorFormatError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from exc


def cmd_infer(args) -> int:
    out = _require_out(args)
    params, cfg = _load_ckpt(args.ckpt)
    icfg = _infer_config(args)
    if args.proposals is not None:
        icfg = replace(icfg, proposal_mode="file")
    samples = _load_data(args.data)
    _echo(out, train=cfg, infer=icfg, seed=args.seed, ckpt=str(args.ckpt), data=str(args.data))
    props = dataset_proposals(samples, icfg, args.seed, proposal_file=args.proposals)
    results = infer_dataset(samples, params, cfg, icfg, args.seed, proposals=props)
    write_predictions(out, results, {s.id: s.class_map.shape for s in samples})
    n = sum(len(r.instances) for r in results.values())
    dropped = sum(r.discarded_rois for r in results.values())
    print(f"{len(results)} images, {n} instances, {dropped} ROIs discarded; predictions in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.pred is None:
        raise UsageError("--pred is required")
    pred = Path(args.pred)
    samples = _load_data(args.data)
    ids = [s.id for s in samples]
    preds, sem = read_predictions(pred, ids, {s.id: s.class_map.shape for s in samples})
    gts = {s.id: [(ins.category, ins.mask) for ins in s.instances] for s in samples}
    num_categories = len(CATEGORY_NAMES) - 1
    res = evaluate(
        preds, gts, num_categories, args.iou,
        semantic_pred=sem or None,
        semantic_gt={s.id: s.class_map for s in samples} if sem else None,
    )
    name = args.name or pred.name
    print(format_table([(name, *(res.map_r[t] for t in args.iou))], args.iou))
    if res.mean_iu is not None:
        print(f"mean accuracy {100 * res.mean_accuracy:.1f}%  mean IU {100 * res.mean_iu:.1f}%")
    out = Path(args.out) if args.out else pred
    _echo(out, eval={"iou": list(args.iou), "pred": str(pred), "data": str(args.data)})
    (out / "eval.json").write_text(json.dumps(res.to_json(), sort_keys=True, indent=1))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = sorted(SCOPES) if args.scope in (None, ["all"]) else args.scope
    unknown = [s for s in scopes if s not in SCOPES]
    if unknown:
        raise UsageError(f"unknown scope(s) {unknown}; choose from {sorted(SCOPES)}")
    reports = []
    for s in scopes:
        r = grad_check(s, trials=args.trials, seed=args.seed)
        flag = "ok" if r.passed() else "FAIL"
        print(f"{s:<18} max rel err {r.worst:.3e}  ({r.checked} coords, {r.skipped} at kinks)  {flag}")
        reports.append(r)
    if args.out:
        out = Path(args.out)
        _echo(out, gradcheck={"scopes": scopes, "trials": args.trials, "seed": args.seed})
        body = [{k: v for k, v in r.to_json().items() if k != "seconds"} for r in reports]
        (out / "gradcheck.json").write_text(json.dumps(body, sort_keys=True, indent=1))
    return EXIT_OK if all(r.passed() for r in reports) else EXIT_NUMERIC


def sweep_rows(train_samples, test_samples, cfg: TrainConfig, icfg: InferConfig, pairs, seed: int):
    rows = []
    for k1, k2 in pairs:
        c = replace(cfg, partitions=(k1, k2), variant="biseg-fused", seed=seed)
        params, _ = train_toy(train_samples, c)
        res = evaluate_results(test_samples, infer_dataset(test_samples, params, c, icfg, seed), c.num_categories)
        rows.append((k1, k2, res.map_r[0.5], res.map_r[0.7]))
        log.info("sweep (%d,%d): %.4f %.4f", k1, k2, res.map_r[0.5], res.map_r[0.7])
    return rows


def cmd_sweep(args) -> int:
    out = _require_out(args)
    cfg = _train_config(args)
    icfg = _infer_config(args)
    train_samples = _load_data(args.train)
    test_samples = _load_data(args.test)
    _echo(out, train=cfg, infer=icfg, pairs=[list(p) for p in args.pairs], seed=args.seed)
    rows = sweep_rows(train_samples, test_samples, cfg, icfg, args.pairs, args.seed)
    with (out / "sweep.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k1", "k2", "mAPr05", "mAPr07"])
        for k1, k2, a, b in rows:
            wr.writerow([k1, k2, f"{a:.6f}", f"{b:.6f}"])
    print(format_table([(f"({k1},{k2})", a, b) for k1, k2, a, b in rows], (0.5, 0.7)))
    return EXIT_OK


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend palette colours for nonzero labels over an HWC uint8 image."""
    colors = _PALETTE[1 + (labels - 1) % (len(_PALETTE) - 1)]
    blend = np.round((1 - alpha) * image + alpha * colors).astype(np.uint8)
    return np.where((labels > 0)[..., None], blend, image)


def cmd_render(args) -> int:
    out = _require_out(args)
    if args.pred is None:
        raise UsageError("--pred is required")
    pred = Path(args.pred)
    icfg = _infer_config(args)
    samples = _load_data(args.data)
    preds, sem = read_predictions(pred, [s.id for s in samples], {s.id: s.class_map.shape for s in samples})
    _echo(out, render={"pred": str(pred), "min_score": icfg.render_min_score})
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        labels = np.zeros(s.class_map.shape, np.int64)
        kept = [(score, i, m) for i, (_, score, m) in enumerate(preds[s.id]) if score > icfg.render_min_score]
        for n, (_, _, m) in enumerate(sorted(kept, key=lambda t: (t[0], -t[1])), start=1):
            labels[m] = n
        write_pnm(out / "overlays" / f"{s.id}_instances.ppm", overlay(rgb, labels))
        if s.id in sem:
            write_pnm(out / "overlays" / f"{s.id}_semantic.ppm", overlay(rgb, sem[s.id]))
    print(f"rendered {len(samples)} images to {out / 'overlays'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config with optional train/infer/synth sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path)
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="biseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n", type=int, default=200)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--data", type=Path)
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--iters", type=int)
    t.add_argument("--progress", type=int, default=0, help="log every N iterations (0: silent)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="run a checkpoint over a dataset")
    i.add_argument("--ckpt", type=Path)
    i.add_argument("--data", type=Path)
    i.add_argument("--proposals", type=Path, help="CSV: image_id,x0,y0,x1,y1,objectness")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="mAP^r and semantic metrics")
    e.add_argument("--pred", type=Path)
    e.add_argument("--data", type=Path)
    e.add_argument("--iou", type=_floats, default=(0.5, 0.7))
    e.add_argument("--name")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--scope", nargs="+", help=f"one or more of {sorted(SCOPES)} or 'all'")
    c.add_argument("--trials", type=int, default=10)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", parents=[common], help="train/evaluate biseg-fused over (k1,k2) pairs")
    s.add_argument("--train", type=Path)
    s.add_argument("--test", type=Path)
    s.add_argument("--pairs", type=parse_pair, nargs="+", default=[(7, 7), (7, 9), (7, 11)])
    s.add_argument("--iters", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("render", parents=[common], help="PPM overlays of predictions")
    r.add_argument("--pred", type=Path)
    r.add_argument("--data", type=Path)
    r.set_defaults(func=cmd_render)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"biseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"biseg {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"biseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PnmError, TensorFormatError, FileNotFoundError, ValueError) as exc:
        print(f"biseg {args.command}: data error: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
