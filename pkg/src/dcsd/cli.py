"""Command-line front end: gen-data, train, eval, benchmark, ablate-temperature, gap-report, overlay."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import PRESETS, RunConfig, from_dict, load_config, with_overrides
from .data import SegDataset, corpus_manifest, generate_synthetic_corpus, load_centers
from .losses import ConfigError
from .metrics import METRIC_NAMES, MetricsReport, evaluate_dataset, predict_probs, binarize
from .segmodel import load_checkpoint
from .trainer import MODES, fit, set_deterministic

log = logging.getLogger("dcsd")

WORKERS_ENV = "DCSD_MAX_WORKERS"
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


# ---------------------------------------------------------------- helpers


def prepare_data(cfg: RunConfig, out: Path) -> Path:
    """Return the corpus root, synthesizing it under ``<out>/data`` when none is configured."""
    if cfg.data.root is not None:
        root = Path(cfg.data.root)
        if not root.is_dir():
            raise FileNotFoundError(f"data.root not found: {root}")
        return root
    root = out / "data"
    plan = cfg.data.plan()
    manifest = corpus_manifest(plan, cfg.data.synth.shifts, cfg.data.synth.seed, cfg.model.input_size)
    mpath = root / "manifest.json"
    if mpath.is_file() and json.loads(mpath.read_text()) == json.loads(json.dumps(manifest)):
        log.info("corpus at %s matches manifest; not regenerating", root)
        return root
    log.info("generating synthetic corpus under %s", root)
    generate_synthetic_corpus(root, plan, cfg.data.synth.shifts, cfg.data.synth.seed, cfg.model.input_size)
    return root


def split_centers(cfg: RunConfig, split: str) -> list[str]:
    if split == "train":
        return list(cfg.data.train_centers)
    if split == "test":
        return list(cfg.data.test_centers)
    if split in cfg.data.train_centers or split in cfg.data.test_centers:
        return [split]
    raise ConfigError(f"unknown split {split!r}; use train, test or a center id")


def load_split(cfg: RunConfig, root: Path, split: str) -> SegDataset:
    return load_centers(root, split_centers(cfg, split), cfg.model.input_size)


def _seeded(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return with_overrides(cfg, **{"train.seed": seed, "model.seed": seed})


def train_and_eval(cfg: RunConfig, root: Path, run_dir: Path) -> dict[str, MetricsReport]:
    """Fit on the train split, write log/checkpoint/resolved config, evaluate every eval split."""
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.resolved.yaml")
    set_deterministic()
    train = load_split(cfg, root, "train")
    result = fit(train, cfg.model, cfg.train.training_config(), cfg.train.mode, out_dir=run_dir)
    reports = {}
    for split in cfg.eval.splits:
        ds = train if split == "train" else load_split(cfg, root, split)
        rep = evaluate_dataset(result.model, ds, cfg.eval.threshold, split, cfg.eval.average)
        rep.save(run_dir, cfg.eval.per_image_csv)
        reports[split] = rep
    return reports


def _cell(args) -> tuple[str, int, dict]:
    cfg_dict, root, run_dir, mode, seed = args
    cfg = from_dict(cfg_dict)
    reports = train_and_eval(cfg, Path(root), Path(run_dir))
    return mode, seed, {s: r.to_dict() for s, r in reports.items()}


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer")


def run_cells(jobs: list[tuple]) -> list[tuple[str, int, dict]]:
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell, jobs))


def mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def _write_table(out: Path, stem: str, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    (out / f"{stem}.csv").write_text(buf.getvalue())
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(r) + " |" for r in rows]
    (out / f"{stem}.md").write_text("\n".join(md) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> int:
    if cfg.data.root is not None:
        raise ConfigError("gen-data writes under --out; unset data.root")
    root = prepare_data(cfg, out)
    cfg.dump(out / "config.resolved.yaml")
    print(f"corpus: {root} ({', '.join(cfg.data.plan().centers)})")
    return 0


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    root = prepare_data(cfg, out)
    reports = train_and_eval(cfg, root, out)
    for rep in reports.values():
        print(rep.to_table(), end="")
    return 0


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    cfg = with_overrides(cfg, **{"model.input_size": list(model.config.input_size), "train.input_size": list(model.config.input_size)})
    root = prepare_data(cfg, out)
    for split in args.split or cfg.eval.splits:
        ds = load_split(cfg, root, split)
        rep = evaluate_dataset(model, ds, cfg.eval.threshold, split, args.average or cfg.eval.average)
        rep.save(out, args.per_image_csv or cfg.eval.per_image_csv)
        print(rep.to_table(), end="")
    return 0


def cmd_benchmark(args, cfg: RunConfig, out: Path) -> int:
    seeds = args.seeds or list(DEFAULT_SEEDS)
    modes = args.modes or list(MODES)
    root = prepare_data(cfg, out)
    jobs = []
    for seed in seeds:
        for mode in modes:
            c = _seeded(with_overrides(cfg, **{"train.mode": mode, "data.root": str(root)}), seed)
            jobs.append((c.to_dict(), str(root), str(out / "runs" / f"{mode}_seed{seed}"), mode, seed))
    results = run_cells(jobs)
    splits = list(cfg.eval.splits)
    cells = {f"{m}/{s}": reps for m, s, reps in results}
    summary = {"seeds": seeds, "modes": modes, "splits": splits, "cells": {}, "aggregate": {}}
    for m, s, reps in results:
        summary["cells"][f"{m}/{s}"] = {sp: {k: reps[sp][f"mean_{k}"] for k in METRIC_NAMES} for sp in splits}
    header = ["mode"] + [f"{sp} {k}" for sp in splits for k in ("Dice", "IoU")]
    rows = []
    for m in modes:
        agg = {}
        row = [m]
        for sp in splits:
            for k in ("dice", "iou"):
                mu, sd = mean_std([cells[f"{m}/{s}"][sp][f"mean_{k}"] for s in seeds])
                agg[f"{sp}/{k}"] = {"mean": mu, "std": sd}
                row.append(f"{mu:.4f} ± {sd:.4f}")
        summary["aggregate"][m] = agg
        rows.append(row)
    _write_table(out, "benchmark", header, rows)
    (out / "benchmark.json").write_text(json.dumps(summary, indent=2) + "\n")
    print((out / "benchmark.md").read_text(), end="")
    return 0


def cmd_ablate_temperature(args, cfg: RunConfig, out: Path) -> int:
    temps = args.temperatures or [1.0, 4.0]
    bad = [t for t in temps if not t > 0]
    if bad:
        raise ConfigError(f"temperatures must be > 0, got {bad}")
    split = args.split[0] if args.split else "test"
    root = prepare_data(cfg, out)
    jobs = []
    for t in temps:
        c = with_overrides(cfg, **{"train.mode": "dcsd", "train.temperature": t, "data.root": str(root)})
        c = with_overrides(c, **{"eval.splits": sorted({split, *c.eval.splits})})
        jobs.append((c.to_dict(), str(root), str(out / "runs" / f"dcsd_T{t:g}"), "dcsd", t))
    results = run_cells(jobs)
    header = ["method", "Dice", "IoU", "Precision", "Recall"]
    if len(temps) > 1:
        header.append(f"ΔDice vs T={temps[0]:g}")
    rows, table = [], []
    first = None
    for (_, t, reps), temp in zip(results, temps):
        r = reps[split]
        vals = [r[f"mean_{k}"] for k in METRIC_NAMES]
        first = vals[0] if first is None else first
        row = [f"DCSD (T={temp:g})"] + [f"{v:.4f}" for v in vals]
        if len(temps) > 1:
            row.append(f"{vals[0] - first:+.4f}")
        rows.append(row)
        table.append({"temperature": temp, "split": split, **dict(zip(METRIC_NAMES, vals))})
    _write_table(out, "ablation_temperature", header, rows)
    (out / "ablation_temperature.json").write_text(json.dumps(table, indent=2) + "\n")
    print((out / "ablation_temperature.md").read_text(), end="")
    return 0


def gap_rows(summary: dict, train_split: str = "train", test_split: str = "test"):
    """(mode, seed, gap) rows plus per-mode (mean, std); gap = train Dice - unseen Dice."""
    per = []
    for key, splits in summary["cells"].items():
        mode, seed = key.split("/")
        if train_split not in splits or test_split not in splits:
            raise ConfigError(f"benchmark cell {key} lacks {train_split!r}/{test_split!r} results")
        per.append((mode, int(seed), splits[train_split]["dice"] - splits[test_split]["dice"]))
    per.sort(key=lambda r: (r[0], r[1]))
    agg = {}
    for mode in sorted({r[0] for r in per}):
        agg[mode] = mean_std([g for m, _, g in per if m == mode])
    return per, agg


def cmd_gap_report(args, cfg: RunConfig, out: Path) -> int:
    bench = Path(args.benchmark or out) / "benchmark.json"
    if not bench.is_file():
        raise FileNotFoundError(f"benchmark results not found: {bench}")
    per, agg = gap_rows(json.loads(bench.read_text()))
    out.mkdir(parents=True, exist_ok=True)
    rows = [[m, str(s), f"{g:.4f}"] for m, s, g in per]
    rows += [[m, "mean±std", f"{mu:.4f} ± {sd:.4f}"] for m, (mu, sd) in agg.items()]
    _write_table(out, "gap_report", ["mode", "seed", "gap"], rows)
    doc = {"per_run": [{"mode": m, "seed": s, "gap": g} for m, s, g in per],
           "aggregate": {m: {"mean": mu, "std": sd} for m, (mu, sd) in agg.items()}}
    (out / "gap_report.json").write_text(json.dumps(doc, indent=2) + "\n")
    print((out / "gap_report.md").read_text(), end="")
    return 0


def _contour(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def cmd_overlay(args, cfg: RunConfig, out: Path) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cfg = with_overrides(cfg, **{"model.input_size": list(model.config.input_size), "train.input_size": list(model.config.input_size)})
    root = prepare_data(cfg, out)
    split = args.split[0] if args.split else "test"
    ds = load_split(cfg, root, split)
    pred = binarize(predict_probs(model, ds.images), cfg.eval.threshold)
    dest = out / "overlays" / split
    dest.mkdir(parents=True, exist_ok=True)
    for i, sid in enumerate(ds.ids):
        rgb = (ds.images[i].transpose(1, 2, 0) * 255).round().astype(np.uint8)
        rgb[_contour(ds.masks[i, 0] > 0.5)] = (0, 255, 0)
        rgb[_contour(pred[i, 0] > 0)] = (255, 0, 0)
        Image.fromarray(rgb, "RGB").save(dest / f"{sid.replace('/', '_')}.png")
    print(f"{len(ds)} overlays -> {dest}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
    "ablate-temperature": cmd_ablate_temperature,
    "gap-report": cmd_gap_report,
    "overlay": cmd_overlay,
}


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named defaults applied under --config")
    common.add_argument("--out", help="output directory (default: report.out)")
    common.add_argument("--seed", type=int, help="seed for model init, data order (and data synthesis for gen-data)")
    common.add_argument("--mode", help=f"training mode: {' | '.join(MODES)}")
    common.add_argument("--temperature", type=float, help="distillation temperature T")
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dcsd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic multi-center corpus")
    sub.add_parser("train", parents=[common], help="train one model and evaluate it")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", action="append", help="train, test or a center id (repeatable)")
    e.add_argument("--average", choices=("macro", "micro"))
    e.add_argument("--per-image-csv", action="store_true")
    b = sub.add_parser("benchmark", parents=[common], help="base/sd/dcsd over several seeds")
    b.add_argument("--seeds", type=_ints, help="comma-separated, default 1,2,3,4,5")
    b.add_argument("--modes", type=lambda s: [check_mode_arg(m) for m in s.split(",")])
    a = sub.add_parser("ablate-temperature", parents=[common], help="dcsd at several temperatures")
    a.add_argument("--temperatures", type=_floats, help="comma-separated, default 1,4")
    a.add_argument("--split", action="append")
    g = sub.add_parser("gap-report", parents=[common], help="train-minus-unseen Dice per run")
    g.add_argument("--benchmark", help="benchmark output directory (default: --out)")
    o = sub.add_parser("overlay", parents=[common], help="prediction/ground-truth contour PNGs")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--split", action="append")
    return p


def check_mode_arg(m: str) -> str:
    if m not in MODES:
        raise argparse.ArgumentTypeError(f"invalid mode {m!r}; valid modes: {', '.join(MODES)}")
    return m


def resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config, args.preset)
    if args.mode is not None and args.mode not in MODES:
        raise ConfigError(f"invalid mode {args.mode!r}; valid modes: {', '.join(MODES)}")
    over = {"train.mode": args.mode, "train.temperature": args.temperature, "train.epochs": args.epochs}
    if args.seed is not None:
        over.update({"train.seed": args.seed, "model.seed": args.seed})
        if args.command == "gen-data":
            over["data.synth.seed"] = args.seed
    cfg = with_overrides(cfg, **over)
    out = Path(args.out or cfg.report.out)
    cfg = with_overrides(cfg, **{"report.out": str(out)})
    return cfg, out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, out = resolve(args)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigError, FileNotFoundError, ValueError, OSError, RuntimeError) as exc:
        print(f"dcsd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
