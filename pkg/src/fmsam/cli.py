"""Command-line entry point: ``fmsam synth | train | eval | ablate``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import torch
import yaml

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, write_archive
from .config import ConfigError, TrainingConfig, preset
from .data import (HORIZONS_MS, SYNTH_PRESETS, DataError, Dataset, FRAME_RATE, load_manifest, ms_to_frames,
                   save_dataset, synth_motion)
from .factorisation import export_mask_grids
from .memory import save_snapshot
from .training import (AblationTable, TrainingDiverged, ablation_from_entry, evaluate, make_windows,
                       predict_windows, run_ablation, train, write_metrics_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --- config resolution ---------------------------------------------------------

def parse_sets(pairs) -> dict:
    """``["lr=1e-3", "ablation.memory=false"]`` -> typed dict (values parsed as YAML scalars)."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def read_mapping(path) -> dict | list:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    try:
        return yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def resolve_config(args, base: TrainingConfig | None = None) -> TrainingConfig:
    """Built-in defaults < named preset < config file < ``--set`` overrides."""
    cfg = base or TrainingConfig()
    if getattr(args, "preset", None):
        cfg = preset(args.preset)
    if getattr(args, "config", None):
        updates = read_mapping(args.config)
        if not isinstance(updates, dict):
            raise UsageError(f"{args.config}: expected a mapping of config keys")
        cfg = cfg.override(updates)
    return cfg.override(parse_sets(getattr(args, "set", None)))


def echo_config(out_dir: Path, command: str, cfg: TrainingConfig, **extra) -> None:
    record = {"tool": "fmsam", "version": __version__, "command": command, **extra, "config": cfg.to_dict()}
    (out_dir / "config.json").write_text(json.dumps(record, indent=1) + "\n")


def parse_horizons(text: str) -> list[int]:
    out = []
    for item in text.split(","):
        try:
            ms = int(item.strip())
        except ValueError:
            raise UsageError(f"horizon {item!r} is not an integer number of milliseconds")
        if ms not in HORIZONS_MS:
            raise UsageError(f"unsupported horizon {ms} ms; choose from {list(HORIZONS_MS)}")
        out.append(ms_to_frames(ms, FRAME_RATE))
    return out


def make_out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def load_data(path) -> Dataset:
    return load_manifest(path)


# --- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = SYNTH_PRESETS[args.preset]
    dataset = synth_motion(config, seed=args.seed)
    out = make_out_dir(args.out)
    manifest = save_dataset(dataset, out)
    counts = Counter((s.subject_id, s.action_label, split) for s, split in zip(dataset.sequences, dataset.splits))
    print(f"wrote {len(dataset)} sequences and {manifest}")
    for (subject, action, split), n in sorted(counts.items()):
        print(f"  {subject}  {action}  {split}: {n}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_data(args.data)
    out = make_out_dir(args.out)
    resume = None
    if args.resume:
        resume, stored = load_checkpoint(args.resume)
        cfg = resolve_config(args, base=stored)
        if cfg != stored:
            resume, _ = load_checkpoint(args.resume, cfg)
    else:
        cfg = resolve_config(args)
    echo_config(out, "train", cfg, data=str(args.data), resume=args.resume)
    try:
        result = train(dataset, cfg, resume=resume, beta_log=out / "beta_log.csv" if args.beta_log else None)
    except TrainingDiverged as exc:
        write_archive(exc.snapshot, out / "diverged.npz")
        print(f"error: {exc} (snapshot in {out / 'diverged.npz'})", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(result, cfg, out / "checkpoint.npz")
    write_metrics_csv(result.log, out / "metrics.csv")
    if result.model.memory is not None:
        save_snapshot(result.model.memory, out / "memory.npz")
    last = result.log[-1] if result.log else {}
    print(f"trained to epoch {result.epoch}; final loss {last.get('loss_total', float('nan')):.6g}; "
          f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    horizons = parse_horizons(args.horizons)
    dataset = load_data(args.data)
    out = make_out_dir(args.out)
    if args.checkpoint:
        result, cfg = load_checkpoint(args.checkpoint)
        model, actions = result.model, result.actions
    elif args.zero_velocity:
        result, model, actions = None, None, None
        cfg = resolve_config(args)
    else:
        raise UsageError("--checkpoint is required unless --zero-velocity is given")
    report = evaluate(model, dataset, horizons, cfg, split=args.split, actions=actions,
                      zero_velocity=args.zero_velocity)
    report.to_csv(out / "report.csv")
    text = report.render_text()
    if report.task_accuracy is not None:
        text += f"task accuracy: {report.task_accuracy:.4f}\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    echo_config(out, "eval", cfg, data=str(args.data), checkpoint=args.checkpoint,
                zero_velocity=args.zero_velocity)
    if args.plot:
        plot_curve(report, out / "horizon_curve")
    if args.masks and model is not None and model.toggles.factorisation:
        windows = make_windows(dataset, args.split, cfg, cfg.eval_stride, actions)
        _, _, masks = predict_windows(model, windows.frames)
        export_mask_grids(torch.as_tensor(masks.mean(axis=0)), out / "masks")
    return EXIT_OK


def plot_curve(report, stem: Path) -> None:
    """Average MPJPE against horizon as ``<stem>.png`` with its data in ``<stem>.csv``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ms = [int(round(h * 1000 / report.fps)) for h in report.horizons]
    avg = [report.average(h) for h in report.horizons]
    lines = ["horizon_ms,frames,mpjpe_mm"] + [f"{m},{h},{v:.3f}" for m, h, v in zip(ms, report.horizons, avg)]
    stem.with_suffix(".csv").write_text("\n".join(lines) + "\n")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ms, avg, marker="o")
    ax.set_xlabel("horizon (ms)")
    ax.set_ylabel("average MPJPE (mm)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(stem.with_suffix(".png"), dpi=100)
    plt.close(fig)


def parse_grid(obj) -> dict:
    """Grid file: a list (or ``{"variants": [...]}``) of variant names or
    ``{"name": ..., "variant": ..., <toggle>: bool}`` entries."""
    entries = obj.get("variants") if isinstance(obj, dict) else obj
    if not isinstance(entries, list) or not entries:
        raise UsageError("grid must list at least one variant")
    grid = {}
    for entry in entries:
        if isinstance(entry, str):
            entry = {"name": entry, "variant": entry}
        if not isinstance(entry, dict):
            raise UsageError(f"grid entry {entry!r} is neither a name nor a mapping")
        name = str(entry.get("name") or entry.get("variant") or f"variant{len(grid)}")
        grid[name] = ablation_from_entry(entry)
    return grid


def cmd_ablate(args) -> int:
    grid = parse_grid(read_mapping(args.grid))
    horizons = parse_horizons(args.horizons)
    dataset = load_data(args.data)
    cfg = resolve_config(args)
    out = make_out_dir(args.out)
    echo_config(out, "ablate", cfg, data=str(args.data), grid=list(grid))
    try:
        table: AblationTable = run_ablation(grid, dataset, cfg, horizons, out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    table.to_csv(out / "ablation.csv")
    text = table.render_text()
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmsam", description="Factorised multi-scale GCN with auxiliary memory "
                                                              "for human motion prediction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p, default_preset=None):
        p.add_argument("--preset", default=default_preset, help="named preset: fullscale, desk or tiny")
        p.add_argument("--config", help="YAML or JSON file of config keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable), e.g. theta_div=0 or ablation.memory=false")

    p = sub.add_parser("synth", help="write a synthetic dataset (CSV poses + manifest)")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="default", choices=sorted(SYNTH_PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes checkpoint, metrics.csv and config.json")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True)
    config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--beta-log", action="store_true", help="stream slot-update weights to beta_log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-action, per-horizon MPJPE report")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizons", default=",".join(map(str, HORIZONS_MS)), help="milliseconds, comma separated")
    p.add_argument("--split", default="test")
    p.add_argument("--zero-velocity", action="store_true", help="report the last-pose baseline instead")
    p.add_argument("--plot", action="store_true", help="also write horizon_curve.png and .csv")
    p.add_argument("--masks", action="store_true", help="export mean mask heat-grids")
    config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every variant of a grid with one seed")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizons", default="80,400,1000")
    config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
