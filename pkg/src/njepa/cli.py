"""Command-line entry point: ``njepa <command> [--config F] [--seed S] [--override k=v ...]``.

Commands
--------
pretrain        train from scratch (or ``--resume CKPT``) and write config, metrics, checkpoints
probe           linear probe on frozen features of a checkpoint; appends to probe_results.csv
lowshot         the probe on a stratified label fraction
inspect-masks   text rendering of sampled mask layouts
schedules       CSV of lr, wd and EMA momentum for every executed step
stats           collapse diagnostics of a checkpoint's features

``NJEPA_OUTPUT_DIR`` replaces the configured output directory; an explicit
``--override run.output_dir=...`` still wins.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import Dataset, load_dataset, make_synthetic
from .evaluation import (ProbeConfig, append_result, extract_features, linear_probe,
                         low_shot_eval, representation_stats)
from .masking import render_layout, sample_layouts
from .trainer import build_schedules, restore, substream, total_steps_for, train_loop

ENV_OUTPUT = "NJEPA_OUTPUT_DIR"
log = logging.getLogger("njepa")


class CLIError(Exception):
    pass


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    env = os.environ.get(ENV_OUTPUT)
    if env:
        cfg.run.output_dir = env
    config_mod.apply_overrides(cfg, args.override or [])
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg.validate()


def train_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path:
        return load_dataset(d.path, "train")
    return make_synthetic(d.synthetic_seed, d.synthetic_per_class, d.synthetic_classes,
                          cfg.model.image_size, "train")


def eval_dataset(cfg: RunConfig, train: Dataset) -> Dataset:
    d = cfg.data
    stats = (train.mean, train.std)
    if d.eval_path:
        return load_dataset(d.eval_path, "test", stats)
    if d.path:
        raise CLIError("data.eval_path is required when data.path is set")
    return make_synthetic(d.synthetic_seed + 1, d.synthetic_test_per_class, d.synthetic_classes,
                          cfg.model.image_size, "test", stats)


def _check_image_shape(cfg: RunConfig, ds: Dataset) -> None:
    _, c, h, w = ds.images.shape
    m = cfg.model
    if (c, h, w) != (m.channels, m.image_size, m.image_size):
        raise CLIError(f"dataset images are {c}x{h}x{w}, model expects "
                       f"{m.channels}x{m.image_size}x{m.image_size}")


def _load_bundle(path):
    if not path:
        raise CLIError("--checkpoint is required")
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    ckpt_cfg, bundle, _ = restore(load_checkpoint(path))
    return ckpt_cfg, bundle


# -- commands -------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, args) -> int:
    ds = train_dataset(cfg)
    _check_image_shape(cfg, ds)
    res = train_loop(cfg, ds, output_dir=cfg.run.output_dir, resume=args.resume)
    last = res.rows[-1] if res.rows else None
    print(f"steps={res.step} final_total={last['total'] if last else float('nan'):.6f} "
          f"checkpoint={res.checkpoint_path} metrics={res.metrics_path}")
    return 0


def _probe_common(cfg: RunConfig, args, fraction: float) -> int:
    ckpt_cfg, bundle = _load_bundle(args.checkpoint)
    train = train_dataset(cfg)
    test = eval_dataset(cfg, train)
    _check_image_shape(ckpt_cfg, train)
    pcfg = ProbeConfig.from_run(cfg)
    pcfg.label_fraction = fraction
    if fraction < 1.0:
        top1 = low_shot_eval(bundle, train, test, fraction, pcfg, cfg.probe.encoder)
    else:
        ftr = extract_features(bundle, train, pcfg.feature_source, pcfg.last_k, cfg.probe.encoder)
        fte = extract_features(bundle, test, pcfg.feature_source, pcfg.last_k, cfg.probe.encoder)
        top1 = linear_probe(ftr, fte, pcfg)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe_config.cfg").write_text(cfg.dumps())
    append_result(out / "probe_results.csv", str(args.checkpoint), pcfg.feature_source,
                  fraction, cfg.run.seed, top1)
    print(f"top1={top1:.4f} feature_source={pcfg.feature_source} label_fraction={fraction}")
    return 0


def cmd_probe(cfg, args) -> int:
    return _probe_common(cfg, args, cfg.probe.label_fraction)


def cmd_lowshot(cfg, args) -> int:
    return _probe_common(cfg, args, args.fraction)


def cmd_inspect_masks(cfg: RunConfig, args) -> int:
    if args.count < 1:
        raise CLIError("--count must be >= 1")
    rng = substream(cfg.run.seed, "masking", 0)
    layouts = sample_layouts(rng, cfg.grid, args.count, **cfg.mask_kwargs())
    gh, gw = cfg.grid
    print(f"# {args.count} layouts on a {gh}x{gw} grid; o=context, 1-9=target block, .=dropped")
    for i, lay in enumerate(layouts):
        sizes = " ".join(f"{b.height}x{b.width}" for b in lay.target_blocks)
        print(f"layout {i}: context={len(lay.context_indices)} targets={sizes} retries={lay.retries}")
        print(render_layout(lay, cfg.grid))
        print()
    return 0


def cmd_schedules(cfg: RunConfig, args) -> int:
    steps = cfg.train.steps if cfg.train.steps > 0 else total_steps_for(cfg, len(train_dataset(cfg)))
    sch = build_schedules(cfg, steps)
    lines = ["step,lr,wd,q"]
    for k in range(1, steps + 1):
        lr, wd, q = sch.at(k)
        lines.append(f"{k},{lr!r},{wd!r},{q!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_stats(cfg: RunConfig, args) -> int:
    ckpt_cfg, bundle = _load_bundle(args.checkpoint)
    train = train_dataset(cfg)
    test = eval_dataset(cfg, train)
    feats = extract_features(bundle, test, cfg.probe.feature_source, cfg.probe.last_k,
                             cfg.probe.encoder)
    st = representation_stats(feats)
    print(f"rows={len(feats)} dim={feats.features.shape[1]} "
          f"active_dims={st.fraction_active():.4f} min_std={st.dim_std.min():.6g} "
          f"median_std={float(np.median(st.dim_std)):.6g} mean_cosine={st.mean_cosine:.6f} "
          f"effective_rank={st.effective_rank:.4f}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "lowshot": cmd_lowshot,
    "inspect-masks": cmd_inspect_masks,
    "schedules": cmd_schedules,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="root seed (run.seed)")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="set one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="njepa", description="noised joint-embedding predictive pre-training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("pretrain", parents=[common], help="pre-train an encoder")
    p.add_argument("--resume", help="checkpoint to continue from")
    for name in ("probe", "stats"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("lowshot", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p = sub.add_parser("inspect-masks", parents=[common])
    p.add_argument("--count", type=int, default=4)
    p = sub.add_parser("schedules", parents=[common])
    p.add_argument("--out", help="write CSV here instead of stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except KeyboardInterrupt:
        print("njepa: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line cause, nonzero exit
        if args.verbose:
            log.exception("command failed")
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"njepa {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
