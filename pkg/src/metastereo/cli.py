"""Command-line entry point for reproducible experiments.

Subcommands:
  gen-data    render a synthetic stereo dataset to disk
  train       train a disparity model (sl | l2a | l2a-weighted)
  adapt-eval  evaluate a checkpoint on a dataset with online adaptation
  compare     build a delta table of runs against a baseline
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .adapt import AdaptConfig, run_sequence
from .autodiff import ConfigError, ContractError, NumericFault, ShapeError
from .meta import train_meta, train_supervised
from .metrics import (
    aggregate,
    compare_runs,
    read_metrics_csv,
    write_compare_csv,
    write_curve_csv,
    write_metrics_csv,
    write_report_csv,
)
from .model import init_confidence_net, init_disparity_net
from .synthdata import benchmark_specs, generate_dataset

TRAIN_MODES = ("sl", "l2a", "l2a-weighted")
ADAPT_MODES = ("none", "ad", "wad")


def _load_experiment(args) -> fileio.ExperimentConfig:
    cfg = fileio.load_config(args.config) if args.config else fileio.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_experiment(args)
    d = cfg.data
    specs = benchmark_specs(d.preset, d.sequences, cfg.seed,
                            height=cfg.net.height, width=cfg.net.width,
                            integer_disparities=d.integer_disparities)
    dataset = generate_dataset(specs, d.frames, cfg.seed, gt_retention=d.gt_retention)
    out = Path(args.out)
    fileio.save_dataset(dataset, out, seed=cfg.seed, extra_manifest={
        "preset": d.preset,
        "frames_per_sequence": d.frames,
        "gt_retention": d.gt_retention,
        "focal": specs[0][0].focal,
        "baseline": specs[0][0].baseline,
    })
    print(f"wrote {len(dataset.sequences)} sequences x {d.frames} frames to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    dataset = fileio.load_dataset(args.data)
    if not dataset.supervised:
        raise ConfigError("training requires a supervised dataset")
    if args.init:
        net_cfg, theta, eta, _ = fileio.load_checkpoint(args.init)
        if net_cfg != cfg.net:
            raise ConfigError("checkpoint network config does not match experiment config")
    else:
        theta = init_disparity_net(cfg.net, cfg.seed)
        eta = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    meta_cfg = cfg.meta
    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "wall_time"])

        def log_cb(entry):
            writer.writerow([entry.iteration, repr(entry.meta_loss), f"{entry.wall_time:.3f}"])

        if args.mode == "sl":
            theta, _ = train_supervised(dataset, theta, meta_cfg, cfg.seed, log_cb)
            eta = None
        else:
            weighted = args.mode == "l2a-weighted"
            meta_cfg = replace(meta_cfg, weighted=weighted)
            if weighted and eta is None:
                eta = init_confidence_net(cfg.net, cfg.seed + 1)
            theta, eta, _ = train_meta(dataset, theta, eta if weighted else None,
                                       meta_cfg, cfg.seed, log_cb)
    ckpt = out / "checkpoint.bin"
    fileio.save_checkpoint(ckpt, cfg.net, theta, eta, provenance={
        "command": f"train --mode {args.mode}",
        "config_hash": fileio.config_hash(cfg),
        "iterations": meta_cfg.iterations,
    })
    print(f"wrote checkpoint to {ckpt}")
    return 0


def _dump_panels(out_dir: Path, seq_id: str, t: int, disp, eps, mask) -> None:
    base = out_dir / f"{seq_id}_frame{t:04d}"
    fileio.write_pgm16(f"{base}_disp.pgm", disp.data[0, 0])
    if eps is not None:
        scale = max(float(eps.values.data.max()), 1e-9)
        fileio.write_pgm8(f"{base}_error.pgm", eps.values.data[0, 0] / scale)
    if mask is not None:
        fileio.write_pgm8(f"{base}_conf.pgm", mask.raw.data[0, 0])
        if eps is not None:
            weighted = mask.raw.data[0, 0] * eps.values.data[0, 0]
            scale = max(float(weighted.max()), 1e-9)
            fileio.write_pgm8(f"{base}_weighted_error.pgm", weighted / scale)


def cmd_adapt_eval(args) -> int:
    cfg = _load_experiment(args)
    net_cfg, theta, eta, _ = fileio.load_checkpoint(args.checkpoint)
    dataset = fileio.load_dataset(args.data)
    adapt_cfg = cfg.adapt
    if args.adaptation == "none":
        adapt_cfg = replace(adapt_cfg, alpha=0.0, weighted=False)
    elif args.adaptation == "ad":
        adapt_cfg = replace(adapt_cfg, weighted=False)
    else:
        if eta is None:
            raise ConfigError("wad adaptation requires a checkpoint with confidence parameters")
        adapt_cfg = replace(adapt_cfg, weighted=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img_dir = out / "images"
    if args.dump_images:
        img_dir.mkdir(exist_ok=True)
    records = []
    for seq in dataset.sequences:
        on_frame = None
        if args.dump_images:
            dump_at = {0, len(seq) // 2, len(seq) - 1}

            def on_frame(t, disp, eps, mask, _sid=seq.id, _at=dump_at):
                if t in _at:
                    _dump_panels(img_dir, _sid, t, disp, eps, mask)

        records.extend(run_sequence(theta, eta if adapt_cfg.weighted else None,
                                    seq, adapt_cfg, on_frame=on_frame))
    run_id = args.run_id or f"{Path(args.checkpoint).stem}+{args.adaptation}"
    write_metrics_csv(out / "metrics.csv", records, run_id)
    report = aggregate(records)
    write_report_csv(out / "report.csv", report)
    write_curve_csv(out / "curve.csv", report)
    print(f"{run_id}: dataset EPE {report.dataset_epe:.4f}, "
          f"D1-all {report.dataset_d1:.3f}% over {len(records)} frames")
    return 0


def cmd_compare(args) -> int:
    reports = {}
    for spec in args.runs:
        if "=" in spec:
            name, path = spec.split("=", 1)
        else:
            name, path = Path(spec).name, spec
        metrics_path = Path(path)
        if metrics_path.is_dir():
            metrics_path = metrics_path / "metrics.csv"
        if not metrics_path.exists():
            raise ConfigError(f"no metrics.csv found for run '{name}' at {metrics_path}")
        reports[name] = aggregate(read_metrics_csv(metrics_path))
    rows = compare_runs(reports, args.baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_compare_csv(out / "comparison.csv", rows)
    for r in rows:
        print(f"{r.method}: D1-all {r.d1_all:.3f}% (delta {r.delta_d1:+.3f}), "
              f"EPE {r.epe:.4f} (delta {r.delta_epe:+.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metastereo",
                                     description="meta-learned online stereo adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--mode", choices=TRAIN_MODES, required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--init", help="checkpoint to initialize from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("adapt-eval", help="evaluate with online adaptation")
    common(p)
    p.add_argument("--adaptation", choices=ADAPT_MODES, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run-id", default=None)
    p.add_argument("--dump-images", action="store_true")
    p.set_defaults(fn=cmd_adapt_eval)

    p = sub.add_parser("compare", help="delta table against a baseline run")
    p.add_argument("--baseline", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("runs", nargs="+", help="run directories or name=path pairs")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError, ShapeError, NumericFault, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
