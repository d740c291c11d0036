"""Experiment driver.

Subcommands: synth, pretrain, probe, eval, diagnose, ablate, plot,
print-config. Every run directory gets the fully resolved config so any
result is reproducible from that file plus the seeds. Set VIDSSL_OUT_ROOT to
prefix relative output directories.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .config import (ExperimentConfig, apply_overrides, dump_config,
                     load_config, run_id)
from .evaluation import (accuracy, attention_map, finetune, occlusion_report,
                         predict_video, train_linear_probe,
                         write_occlusion_report)
from .training import (TrainingDiverged, encoder_from_checkpoint,
                       latest_checkpoint, run_pretrain)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
        overrides["data.seed"] = args.seed
        overrides["eval.seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.train.validate()
    return cfg


def _pretrain_id(cfg: ExperimentConfig) -> str:
    fingerprint = {
        "data": dataclasses.asdict(cfg.data),
        "augment": dataclasses.asdict(cfg.augment),
        "train": dataclasses.asdict(cfg.train),
    }
    return run_id(fingerprint)


def _manifest_path(cfg: ExperimentConfig) -> Path:
    return cfg.resolved_out_dir() / "dataset" / "manifest.jsonl"


def _require_manifest(cfg: ExperimentConfig) -> list:
    path = _manifest_path(cfg)
    if not path.exists():
        raise SystemExit(f"no dataset manifest at {path}; run `synth` first")
    return data_mod.read_manifest(path)


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    path = _manifest_path(cfg)
    if path.exists() and not args.force:
        print(f"refusing to overwrite {path} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    path.parent.mkdir(parents=True, exist_ok=True)
    records = data_mod.build_dataset(cfg.data)
    data_mod.write_manifest(records, path)
    if args.export_frames:
        frames_dir = path.parent / "frames"
        for record in records[:args.export_frames]:
            data_mod.export_frames(record, cfg.data, frames_dir)
        print(f"exported frames for {min(args.export_frames, len(records))} clips "
              f"to {frames_dir}")
    counts = {}
    for r in records:
        counts[(r.split, r.label)] = counts.get((r.split, r.label), 0) + 1
    print(f"wrote {len(records)} records to {path}")
    for (split, label), n in sorted(counts.items()):
        print(f"  {split} class {label}: {n}")
    return EXIT_OK


def _pretrain_dir(cfg: ExperimentConfig) -> Path:
    return cfg.resolved_out_dir() / "pretrain" / _pretrain_id(cfg)


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    records = _require_manifest(cfg)
    clips, _ = data_mod.render_split(records, cfg.data, "train")
    out = _pretrain_dir(cfg)
    total = cfg.train.warmup_epochs + cfg.train.adversarial_epochs
    done = latest_checkpoint(out)
    if done is not None and not args.resume and args.stop_after_epoch is None:
        if int(done.stem.split("_")[1]) >= total:
            print(f"run already complete at {out} (use --resume to extend)")
            return EXIT_OK
    try:
        state = run_pretrain(cfg, clips, out, resume=args.resume,
                             stop_after_epoch=args.stop_after_epoch)
    except TrainingDiverged as err:
        print(f"aborted: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"pretrained {state.epoch} epochs ({state.step} steps) -> {out}")
    return EXIT_OK


def _resolve_checkpoint(cfg: ExperimentConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    ckpt = latest_checkpoint(_pretrain_dir(cfg))
    if ckpt is None:
        raise SystemExit(f"no checkpoint under {_pretrain_dir(cfg)}; run `pretrain`")
    return ckpt


def cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    records = _require_manifest(cfg)
    ckpt = _resolve_checkpoint(cfg, args)
    encoder, _ = encoder_from_checkpoint(ckpt)
    train_clips, train_labels = data_mod.render_split(records, cfg.data, "train")
    test_clips, test_labels = data_mod.render_split(records, cfg.data, "test")
    mode = "finetune" if args.finetune else "linear"
    encoder, head = finetune(encoder, train_clips, train_labels,
                             cfg.data.num_classes, cfg.eval, seed=cfg.eval.seed,
                             mode=mode)
    top1_train = accuracy(encoder, head, train_clips, train_labels)
    top1_test = accuracy(encoder, head, test_clips, test_labels)
    out = cfg.resolved_out_dir() / "probe"
    out.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": str(ckpt), "mode": mode,
              "top1_train": top1_train, "top1_test": top1_test}
    (out / f"{mode}_{ckpt.stem}.json").write_text(json.dumps(report, indent=2))
    print(f"{mode} top-1: train {top1_train:.4f}, test {top1_test:.4f}")
    return EXIT_OK


def _probe_for_eval(cfg, encoder, records):
    train_clips, train_labels = data_mod.render_split(records, cfg.data, "train")
    head = train_linear_probe(encoder, train_clips, train_labels,
                              cfg.data.num_classes, cfg.eval, seed=cfg.eval.seed)
    return head


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    records = _require_manifest(cfg)
    ckpt = _resolve_checkpoint(cfg, args)
    encoder, _ = encoder_from_checkpoint(ckpt)
    head = _probe_for_eval(cfg, encoder, records)
    videos, labels = data_mod.render_split(records, cfg.data, "test")
    out = cfg.resolved_out_dir() / "eval"
    out.mkdir(parents=True, exist_ok=True)
    rows_path = out / "predictions.csv"
    correct = 0
    entropies = []
    with rows_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "label", "prediction", "correct", "entropy"])
        for i in range(videos.shape[0]):
            rep = predict_video(encoder, head, videos[i], cfg.data.clip_frames,
                                cfg.eval.clips_per_video, video_id=i,
                                label=int(labels[i]))
            correct += int(bool(rep.correct))
            entropies.append(rep.entropy)
            writer.writerow([rep.video_id, rep.label, rep.predicted,
                             int(bool(rep.correct)), repr(rep.entropy)])
    summary = {"checkpoint": str(ckpt), "videos": int(videos.shape[0]),
               "top1": correct / videos.shape[0],
               "mean_entropy": float(np.mean(entropies))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"eval top-1 {summary['top1']:.4f}, mean entropy {summary['mean_entropy']:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _load_cfg(args)
    records = _require_manifest(cfg)
    ckpt = _resolve_checkpoint(cfg, args)
    encoder, _ = encoder_from_checkpoint(ckpt)
    head = _probe_for_eval(cfg, encoder, records)
    videos, labels = data_mod.render_split(records, cfg.data, "test")
    if args.videos:
        videos, labels = videos[:args.videos], labels[:args.videos]
    out = cfg.resolved_out_dir() / "diagnose"
    summary = occlusion_report(encoder, head, videos, labels,
                               cfg.data.clip_frames, cfg.eval.occlusion,
                               cfg.eval.clips_per_video)
    rows_path, summary_path = write_occlusion_report(summary, out)
    maps = attention_map(encoder, videos[0, :cfg.data.clip_frames])
    np.savez(out / "attention_video0.npz", maps=maps.numpy(),
             clip=videos[0, :cfg.data.clip_frames].numpy())
    print(f"occlusion mean entropy delta {summary.mean_entropy_delta:+.4f} "
          f"({len(summary.rows)} videos) -> {rows_path}, {summary_path}")
    return EXIT_OK


ABLATE_COLUMNS = ["mode", "k", "t", "seed", "probe_top1", "finetune_top1",
                  "final_loss", "wall_seconds"]


def _cell_config(cfg: ExperimentConfig, cell: dict) -> ExperimentConfig:
    overrides = {
        "train.mask_mode": cell["mask_mode"],
        "train.drop_count": cell.get("drop_count", cfg.train.drop_count),
        "train.decay": cell.get("decay", cfg.train.decay),
        "train.seed": cell["seed"],
    }
    return apply_overrides(cfg, overrides)


def run_ablation_cell(cfg: ExperimentConfig, cell: dict, out_root: Path,
                      train_clips, train_labels, test_clips, test_labels) -> dict:
    """Pretrain + probe one grid cell; returns the results row."""
    cell_cfg = _cell_config(cfg, cell)
    cell_id = _pretrain_id(cell_cfg)
    cell_dir = out_root / "cells" / cell_id
    result_path = cell_dir / "result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())

    started = time.monotonic()
    state = run_pretrain(cell_cfg, train_clips, cell_dir)
    encoder, head = finetune(state.encoder, train_clips, train_labels,
                             cell_cfg.data.num_classes, cell_cfg.eval,
                             seed=cell_cfg.eval.seed, mode="linear")
    probe_top1 = accuracy(encoder, head, test_clips, test_labels)
    finetune_top1 = None
    if cell_cfg.eval.finetune_enabled:
        enc_ft, head_ft = finetune(state.encoder, train_clips, train_labels,
                                   cell_cfg.data.num_classes, cell_cfg.eval,
                                   seed=cell_cfg.eval.seed, mode="finetune")
        finetune_top1 = accuracy(enc_ft, head_ft, test_clips, test_labels)

    last_epoch = state.epoch - 1
    losses = [m.contrast_loss for m in state.history
              if m.epoch == last_epoch and m.contrast_loss is not None]
    row = {
        "mode": cell_cfg.train.mask_mode,
        "k": cell_cfg.train.drop_count,
        "t": cell_cfg.train.resolved_decay(),
        "seed": cell_cfg.train.seed,
        "probe_top1": probe_top1,
        "finetune_top1": finetune_top1,
        "final_loss": float(np.mean(losses)) if losses else None,
        "wall_seconds": time.monotonic() - started,
    }
    result_path.write_text(json.dumps(row, indent=2))
    return row


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    records = _require_manifest(cfg)
    grid = cfg.ablation.grid()
    if not grid:
        print("empty ablation grid", file=sys.stderr)
        return EXIT_USAGE
    train_clips, train_labels = data_mod.render_split(records, cfg.data, "train")
    test_clips, test_labels = data_mod.render_split(records, cfg.data, "test")
    out_root = cfg.resolved_out_dir() / "ablate"
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cell in enumerate(grid):
        row = run_ablation_cell(cfg, cell, out_root, train_clips, train_labels,
                                test_clips, test_labels)
        rows.append(row)
        print(f"[{i + 1}/{len(grid)}] mode={row['mode']} k={row['k']} "
              f"t={row['t']:.6g} seed={row['seed']} probe_top1={row['probe_top1']:.4f}")
    results_path = out_root / "results.csv"
    with results_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            out_row = {key: ("" if row.get(key) is None else row.get(key))
                       for key in ABLATE_COLUMNS}
            writer.writerow(out_row)
    _write_ablation_summary(rows, out_root / "summary.csv")
    print(f"wrote {results_path}")
    return EXIT_OK


def _write_ablation_summary(rows: list[dict], path: Path) -> None:
    """Mean +- std of probe top-1 per (mode, k, t) cell across seeds."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault((row["mode"], row["k"], row["t"]), []).append(row["probe_top1"])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "k", "t", "seeds", "probe_top1_mean", "probe_top1_std"])
        for (mode, k, t), vals in sorted(groups.items(), key=lambda kv: str(kv[0])):
            writer.writerow([mode, k, t, len(vals),
                             float(np.mean(vals)), float(np.std(vals))])


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        print(f"no such run directory: {run_dir}", file=sys.stderr)
        return EXIT_USAGE
    made = []
    plots = run_dir / "plots"

    metrics = sorted(run_dir.rglob("metrics.csv"))
    if metrics:
        plots.mkdir(parents=True, exist_ok=True)
    for i, metrics_path in enumerate(metrics):
        with metrics_path.open() as fh:
            rows = [r for r in csv.DictReader(fh) if r["contrast_loss"]]
        if not rows:
            continue
        steps = [int(r["step"]) for r in rows]
        losses = [float(r["contrast_loss"]) for r in rows]
        stem = f"loss_curve_{i}" if len(metrics) > 1 else "loss_curve"
        with (plots / f"{stem}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "contrast_loss"])
            writer.writerows(zip(steps, losses))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, losses, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("contrastive loss")
        ax.set_title(str(metrics_path.parent.name))
        fig.tight_layout()
        fig.savefig(plots / f"{stem}.png", dpi=120)
        plt.close(fig)
        made.append(plots / f"{stem}.png")

    occ = run_dir / "diagnose" / "occlusion_summary.json"
    if occ.exists():
        plots.mkdir(parents=True, exist_ok=True)
        summary = json.loads(occ.read_text())
        labels = ["clean", "occluded"]
        values = [summary["mean_entropy_clean"], summary["mean_entropy_occluded"]]
        with (plots / "entropy_bars.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["condition", "mean_entropy"])
            writer.writerows(zip(labels, values))
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.bar(labels, values, color=["tab:blue", "tab:red"])
        ax.set_ylabel("mean prediction entropy (nats)")
        fig.tight_layout()
        fig.savefig(plots / "entropy_bars.png", dpi=120)
        plt.close(fig)
        made.append(plots / "entropy_bars.png")

    att = run_dir / "diagnose" / "attention_video0.npz"
    if att.exists():
        plots.mkdir(parents=True, exist_ok=True)
        blob = np.load(att)
        maps, clip = blob["maps"], blob["clip"]
        slots = maps.shape[0]
        stride = max(clip.shape[0] // slots, 1)
        fig, axes = plt.subplots(2, slots, figsize=(2 * slots, 4.2), squeeze=False)
        for j in range(slots):
            axes[0][j].imshow(clip[j * stride])
            axes[0][j].set_axis_off()
            axes[1][j].imshow(clip[j * stride])
            axes[1][j].imshow(maps[j], cmap="jet", alpha=0.45)
            axes[1][j].set_axis_off()
        fig.tight_layout()
        fig.savefig(plots / "attention_overlay.png", dpi=120)
        plt.close(fig)
        np.save(plots / "attention_overlay_data.npy", maps)
        made.append(plots / "attention_overlay.png")

    if not made:
        print(f"nothing to plot under {run_dir} (no metrics or reports)",
              file=sys.stderr)
        return EXIT_USAGE
    for p in made:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_print_config(args) -> int:
    cfg = _load_cfg(args)
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidssl",
                                     description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override all seeds")
        p.add_argument("--out", help="override output directory")
        return p

    p = common(sub.add_parser("synth", help="write the dataset manifest"))
    p.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    p.add_argument("--export-frames", type=int, default=0, metavar="N",
                   help="also dump the first N clips as PNG frame stacks")
    p.set_defaults(fn=cmd_synth)

    p = common(sub.add_parser("pretrain", help="run contrastive pretraining"))
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--stop-after-epoch", type=int, default=None,
                   help="halt after this many total epochs (for resume tests)")
    p.set_defaults(fn=cmd_pretrain)

    p = common(sub.add_parser("probe", help="linear probe / finetune a checkpoint"))
    p.add_argument("--checkpoint", help="checkpoint path (default: latest)")
    p.add_argument("--finetune", action="store_true", help="update the encoder too")
    p.set_defaults(fn=cmd_probe)

    p = common(sub.add_parser("eval", help="video-level predictions on the test split"))
    p.add_argument("--checkpoint", help="checkpoint path (default: latest)")
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("diagnose", help="occlusion robustness + attention maps"))
    p.add_argument("--checkpoint", help="checkpoint path (default: latest)")
    p.add_argument("--videos", type=int, default=50, help="number of test videos")
    p.set_defaults(fn=cmd_diagnose)

    p = common(sub.add_parser("ablate", help="run the configured grid sweep"))
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="emit figures + data files for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_plot)

    p = common(sub.add_parser("print-config", help="dump the resolved config"))
    p.set_defaults(fn=cmd_print_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
