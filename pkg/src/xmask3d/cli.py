"""Command-line entry points.

    xmask run <config>        train + evaluate, write report/table/checkpoint
    xmask ablate --axis {condition,mask_loss} <config>
    xmask eval <checkpoint> <scenes>
    xmask gen-scenes <config>

Common flags: --seed (repeatable; median-aggregated), --out-dir, --parallel.
Config files are strict JSON: every RunConfig field is a key, unknown keys
are rejected.  Reports are deterministic; wall-clock timestamps go to a
separate run.log so repeated runs stay bit-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, NonFiniteLoss, XMaskError
from .metrics import MetricReport, format_table
from .pipeline import (
    RunConfig,
    TrainedModel,
    evaluate,
    train,
    training_scenes,
    validation_scenes,
)
from .scenes import read_scene_file, write_scene_file


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def _report_rows(name: str, report: MetricReport) -> List[dict]:
    rows = [{"name": name, "hiou": report.hiou, "base": report.base_miou,
             "novel": report.novel_miou}]
    for branch, b in report.branches.items():
        rows.append({"name": f"  {name}/{branch}", "hiou": b.hiou,
                     "base": b.base_miou, "novel": b.novel_miou})
    return rows


def _run_single(config: RunConfig, out_dir: Path, tag: str) -> MetricReport:
    t0 = time.time()
    run_dir = out_dir / tag
    run_dir.mkdir(parents=True, exist_ok=True)
    model, history = train(config)
    report = evaluate(model, validation_scenes(config), config.partition)
    model.save(run_dir / "checkpoint.npz")
    (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (run_dir / "history.json").write_text(
        json.dumps(history, indent=2, sort_keys=True), encoding="utf-8")
    (run_dir / "table.txt").write_text(
        format_table(_report_rows(tag, report)), encoding="utf-8")
    # wall-clock metadata lives outside the deterministic artifacts
    (run_dir / "run.log").write_text(
        f"{time.strftime('%Y-%m-%dT%H:%M:%S')} finished in {time.time()-t0:.1f}s\n",
        encoding="utf-8")
    return report


def _seed_worker(args) -> str:
    config_dict, out_dir, tag = args
    config = RunConfig.from_dict(config_dict)
    report = _run_single(config, Path(out_dir), tag)
    return report.to_json()


def _run_seeds(config: RunConfig, seeds: Sequence[int], out_dir: Path,
               parallel: int, tag_prefix: str = "seed") -> List[MetricReport]:
    jobs = []
    for s in seeds:
        c = dataclasses.replace(config, master_seed=int(s))
        jobs.append((c.to_dict(), str(out_dir), f"{tag_prefix}{s}"))
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            payloads = list(pool.map(_seed_worker, jobs))
        return [MetricReport.from_json(p) for p in payloads]
    return [MetricReport.from_json(_seed_worker(j)) for j in jobs]


def _median_summary(reports: Sequence[MetricReport]) -> dict:
    def med(vals):
        return float(np.median(vals))

    out = {
        "hiou": med([r.hiou for r in reports]),
        "base_miou": med([r.base_miou for r in reports]),
        "novel_miou": med([r.novel_miou for r in reports]),
        "branches": {},
    }
    for branch in reports[0].branches:
        out["branches"][branch] = {
            "hiou": med([r.branches[branch].hiou for r in reports]),
            "base_miou": med([r.branches[branch].base_miou for r in reports]),
            "novel_miou": med([r.branches[branch].novel_miou for r in reports]),
        }
    return out


def cmd_run(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out_dir)
    seeds = args.seed if args.seed else [config.master_seed]
    reports = _run_seeds(config, seeds, out_dir, args.parallel)
    rows = []
    for s, r in zip(seeds, reports):
        rows.extend(_report_rows(f"seed{s}", r))
    if len(reports) > 1:
        summary = _median_summary(reports)
        rows.append({"name": "median", "hiou": summary["hiou"],
                     "base": summary["base_miou"], "novel": summary["novel_miou"]})
        aggregate = {
            "seeds": [int(s) for s in seeds],
            "median": summary,
            "runs": {str(s): r.to_dict() for s, r in zip(seeds, reports)},
        }
        (out_dir / "aggregate_report.json").write_text(
            json.dumps(aggregate, indent=2, sort_keys=True), encoding="utf-8")
    table = format_table(rows, title=f"xmask {__version__} run")
    (out_dir / "table.txt").write_text(table, encoding="utf-8")
    print(table)
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out_dir)
    seeds = args.seed if args.seed else [config.master_seed]
    if args.axis == "mask_loss":
        variants = [("mask_on", {"mask_loss_enabled": True}),
                    ("mask_off", {"mask_loss_enabled": False})]
    else:
        variants = [(m, {"condition_mode": m}) for m in ("text", "image2d", "geom3d")]
    summaries = {}
    rows = []
    for name, override in variants:
        cfg = dataclasses.replace(config, **override)
        reports = _run_seeds(cfg, seeds, out_dir / name, args.parallel)
        summary = _median_summary(reports)
        summaries[name] = summary
        rows.append({"name": name, "hiou": summary["hiou"],
                     "base": summary["base_miou"], "novel": summary["novel_miou"]})
    if args.axis == "mask_loss":
        on, off = summaries["mask_on"], summaries["mask_off"]
        rows.append({"name": "delta (on-off)",
                     "hiou": on["hiou"] - off["hiou"],
                     "base": on["base_miou"] - off["base_miou"],
                     "novel": on["novel_miou"] - off["novel_miou"]})
    table = format_table(rows, title=f"ablation axis: {args.axis}")
    (out_dir / "ablation_report.json").write_text(
        json.dumps(summaries, indent=2, sort_keys=True), encoding="utf-8")
    (out_dir / "table.txt").write_text(table, encoding="utf-8")
    print(table)
    return 0


def cmd_eval(args) -> int:
    model = TrainedModel.load(args.checkpoint)
    scene_path = Path(args.scenes)
    files = sorted(scene_path.glob("*.xm3d")) if scene_path.is_dir() else [scene_path]
    if not files:
        raise ConfigError(f"no scene files under {scene_path}")
    scenes = [read_scene_file(f, scene_id=i) for i, f in enumerate(files)]
    for s in scenes:
        if s.n_categories != model.config.n_categories:
            raise ConfigError(
                f"scene has {s.n_categories} categories, model expects "
                f"{model.config.n_categories}")
    report = evaluate(model, scenes, model.config.partition)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = format_table(_report_rows("eval", report))
    (out_dir / "table.txt").write_text(table, encoding="utf-8")
    print(table)
    return 0


def cmd_gen_scenes(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, scenes in (("train", training_scenes(config)),
                          ("val", validation_scenes(config))):
        for i, scene in enumerate(scenes):
            write_scene_file(scene, out_dir / f"{split}_{i:03d}.xm3d")
    n = config.n_train_scenes + config.n_val_scenes
    print(f"wrote {n} scenes to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmask",
        description="open-vocabulary 3D segmentation experiments on synthetic scenes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, action="append",
                       help="run seed; repeat for median aggregation")
        p.add_argument("--out-dir", default="runs", help="output directory")
        p.add_argument("--parallel", type=int, default=1,
                       help="max concurrent seed runs")

    p_run = sub.add_parser("run", help="train + evaluate one configuration")
    p_run.add_argument("config")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run a one-axis ablation")
    p_abl.add_argument("--axis", required=True, choices=("condition", "mask_loss"))
    p_abl.add_argument("config")
    common(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on scene files")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("scenes", help="scene container file or directory")
    p_eval.add_argument("--out-dir", default="runs", help="output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("gen-scenes", help="write the configured scenes to disk")
    p_gen.add_argument("config")
    p_gen.add_argument("--out-dir", default="scenes", help="output directory")
    p_gen.set_defaults(func=cmd_gen_scenes)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, NonFiniteLoss, XMaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
