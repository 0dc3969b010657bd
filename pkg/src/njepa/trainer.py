"""Pre-training loop: teacher targets, two predictors, AdamW, EMA teacher."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, loads
from .data import Dataset
from .losses import LossReport, LossWeights, batched_denoise_loss, batched_prediction_loss, total_loss
from .masking import MaskBatch, collate, sample_layouts
from .noise import draw_batch_noise
from .optim import AdamW
from .schedules import ScheduleSpec, ema_momentum_at, lr_at, wd_at
from .vit import ModelBundle, Module, encode_student, encode_teacher, patchify, predict

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "lr", "wd", "q", "l_ct", "l_nt", "l_cn", "total", "wall_ms")
SUBSTREAMS = {"init": 1, "masking": 2, "noise": 3, "data": 4, "probe": 5}
RNG_SCHEME = "substream-v1"


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for one named randomness source.

    Streams are keyed by (seed, name, *keys) rather than carried state, so a
    run can be resumed at any step and any one source can be held fixed.
    """
    return np.random.default_rng([int(seed), SUBSTREAMS[name], *map(int, keys)])


def build_bundle(cfg: RunConfig) -> ModelBundle:
    return ModelBundle(cfg.encoder_config(), cfg.predictor_config(), substream(cfg.run.seed, "init"),
                       share_predictors=cfg.model.share_predictors,
                       share_mask_tokens=cfg.model.share_mask_tokens, dtype=cfg.np_dtype,
                       context_pos=cfg.model.pred_context_pos)


@dataclass
class Schedules:
    lr: ScheduleSpec
    wd: ScheduleSpec
    ema: ScheduleSpec

    def at(self, step: int) -> tuple[float, float, float]:
        return lr_at(self.lr, step), wd_at(self.wd, step), ema_momentum_at(self.ema, step)


def build_schedules(cfg: RunConfig, total_steps: int) -> Schedules:
    s = cfg.schedule
    warmup = int(round(s.warmup_fraction * total_steps))
    return Schedules(
        ScheduleSpec("lr", s.lr_start, s.lr_peak, s.lr_final, total_steps, warmup, s.ipe_scale, s.lr_shape),
        ScheduleSpec("weight_decay", s.wd_start, s.wd_final, s.wd_final, total_steps, 0, s.ipe_scale),
        ScheduleSpec("ema_momentum", s.ema_start, s.ema_final, s.ema_final, total_steps, 0, s.ipe_scale),
    )


# -- batch preparation ----------------------------------------------------

@dataclass
class Batch:
    patches: np.ndarray          # (B, N, P)
    masks: MaskBatch
    sigmas: np.ndarray           # (B, L)
    noise: np.ndarray            # (B, L, T, predictor_dim)


def make_batch(images: np.ndarray, cfg: RunConfig, step: int) -> Batch:
    seed = cfg.run.seed
    patches = patchify(np.asarray(images, dtype=cfg.np_dtype), cfg.model.patch_size)
    layouts = sample_layouts(substream(seed, "masking", step), cfg.grid, len(images), **cfg.mask_kwargs())
    masks = collate(layouts, cfg.grid)
    rows = masks.target_valid.sum(axis=-1)
    sigmas, noise = draw_batch_noise(substream(seed, "noise", step), cfg.noise_params(), rows,
                                     cfg.model.pred_embed_dim, cfg.np_dtype)
    return Batch(patches, masks, sigmas, noise)


# -- one optimisation step -----------------------------------------------

@dataclass
class Forward:
    l_ct: Tensor
    l_nt: Tensor
    l_cn: Tensor
    total: Tensor
    pred_c: Tensor
    pred_n: Tensor


def forward_losses(bundle: ModelBundle, batch: Batch, weights: LossWeights) -> Forward:
    m = batch.masks
    b, nblk, t = m.target_idx.shape
    rows = np.arange(b)[:, None, None]
    z_t = encode_teacher(bundle, batch.patches)
    targets = ad.detach(z_t).data[rows, m.target_idx]                 # (B, L, T, D)
    z_s = encode_student(bundle, batch.patches, m.context_idx, m.context_valid)
    rep = np.repeat(np.arange(b), nblk)
    z_rep = ad.take(z_s, rep, axis=0)                                 # (B*L, C, D)
    ctx_valid = m.context_valid[rep]
    tgt_valid = m.target_valid.reshape(b * nblk, t)
    psi_c = bundle.pos_embed[m.target_idx].reshape(b * nblk, t, -1)
    psi_n = psi_c + batch.noise.reshape(b * nblk, t, -1)
    psi_x = bundle.pos_embed[m.context_idx[rep]] if bundle.context_pos else None
    d = bundle.enc_cfg.embed_dim
    pred_c = ad.reshape(predict(bundle, "context", z_rep, psi_c, ctx_valid, tgt_valid, psi_context=psi_x),
                        (b, nblk, t, d))
    pred_n = ad.reshape(predict(bundle, "noise", z_rep, psi_n, ctx_valid, tgt_valid, psi_context=psi_x),
                        (b, nblk, t, d))
    target = Tensor(targets)
    l_ct = batched_prediction_loss(pred_c, target, m.target_valid, weights.elementwise)
    l_nt = batched_prediction_loss(pred_n, target, m.target_valid, weights.elementwise)
    l_cn = batched_denoise_loss(pred_n, pred_c, m.target_valid)
    return Forward(l_ct, l_nt, l_cn, total_loss(l_ct, l_nt, l_cn, weights), pred_c, pred_n)


def ema_update(teacher: Module, student: Module, q: float) -> None:
    """teacher <- q * teacher + (1 - q) * student, in place."""
    t_params = list(teacher.named_parameters())
    s_params = list(student.named_parameters())
    if [(n, p.shape) for n, p in t_params] != [(n, p.shape) for n, p in s_params]:
        raise ValueError("teacher and student topologies differ")
    for (_, tp), (_, sp) in zip(t_params, s_params):
        src = ad.detach(sp).data
        tp.data *= tp.data.dtype.type(q)
        tp.data += tp.data.dtype.type(1.0 - q) * src


def train_step(bundle: ModelBundle, optimizer: AdamW, batch: Batch, weights: LossWeights,
               lr: float, wd: float, q: float) -> LossReport:
    optimizer.zero_grad()
    fwd = forward_losses(bundle, batch, weights)
    fwd.total.backward()
    for _, p in bundle.teacher.named_parameters():
        assert p.grad is None, "teacher parameter received a gradient"
    optimizer.step(lr, wd)
    ema_update(bundle.teacher, bundle.student, q)
    return LossReport(fwd.l_ct.item(), fwd.l_nt.item(), fwd.l_cn.item(), fwd.total.item())


# -- checkpoints ----------------------------------------------------------

def make_checkpoint(cfg: RunConfig, bundle: ModelBundle, optimizer: AdamW, step: int) -> Checkpoint:
    arrays = {name: p.data for name, p in bundle.named_state()}
    arrays.update(optimizer.state_arrays())
    rng = {"scheme": RNG_SCHEME, "seed": cfg.run.seed, "next_step": step + 1}
    return Checkpoint(step, cfg.dumps(), cfg.fingerprint(), arrays, optimizer.t, rng)


def restore(ckpt: Checkpoint, cfg: RunConfig | None = None) -> tuple[RunConfig, ModelBundle, AdamW]:
    """Rebuild bundle and optimizer state from a checkpoint."""
    stored = loads(ckpt.config_text)
    if cfg is None:
        cfg = stored
    elif cfg.fingerprint() != ckpt.fingerprint:
        raise CheckpointError("checkpoint was written by a different configuration")
    bundle = build_bundle(cfg)
    for name, p in bundle.named_state():
        if name not in ckpt.arrays:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        arr = ckpt.arrays[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
        p.data[...] = arr
    optimizer = AdamW(bundle.trainable())
    optimizer.load_state_arrays(ckpt.arrays, ckpt.adam_t)
    return cfg, bundle, optimizer


# -- the loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    optimizer: AdamW
    config: RunConfig
    step: int
    rows: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def steps_per_epoch(cfg: RunConfig, n: int) -> int:
    ipe = n // cfg.train.batch_size
    if ipe < 1:
        raise ValueError(f"dataset of {n} images is smaller than batch size {cfg.train.batch_size}")
    return ipe


def total_steps_for(cfg: RunConfig, n: int) -> int:
    return cfg.train.steps if cfg.train.steps > 0 else cfg.train.epochs * steps_per_epoch(cfg, n)


def batch_indices(cfg: RunConfig, n: int, step: int) -> tuple[int, np.ndarray]:
    """Epoch number and image indices used at 1-based ``step``."""
    ipe = steps_per_epoch(cfg, n)
    epoch, pos = divmod(step - 1, ipe)
    perm = substream(cfg.run.seed, "data", epoch).permutation(n)
    bs = cfg.train.batch_size
    return epoch, perm[pos * bs:(pos + 1) * bs]


def _dump_nonfinite(path: Path, step, lr, wd, q, bundle: ModelBundle, batch: Batch, exc) -> None:
    params = {}
    for name, p in bundle.named_state():
        params[name] = {"finite": bool(np.isfinite(p.data).all()),
                        "max_abs": float(np.nanmax(np.abs(p.data))),
                        "grad_finite": None if p.grad is None else bool(np.isfinite(p.grad).all())}
    info = {"step": step, "lr": lr, "wd": wd, "q": q, "error": str(exc),
            "sigma_max": float(batch.sigmas.max()), "params": params}
    path.write_text(json.dumps(info, indent=1, sort_keys=True))
    log.error("non-finite value at step %d; diagnostics in %s", step, path)


def train_loop(cfg: RunConfig, dataset: Dataset, output_dir: str | Path | None = None,
               resume: str | Path | None = None, log_every: int = 50) -> TrainResult:
    """Run ``total_steps`` optimisation steps; step k uses schedule values at k.

    Writes ``config.cfg``, ``metrics.csv`` and ``checkpoint_*.njck`` files to
    ``output_dir`` when one is given.
    """
    cfg.validate()
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    total = total_steps_for(cfg, n)
    schedules = build_schedules(cfg, total)
    weights = cfg.loss_weights()
    if resume is not None:
        ckpt = load_checkpoint(resume)
        _, bundle, optimizer = restore(ckpt, cfg)
        start = ckpt.step
    else:
        bundle = build_bundle(cfg)
        optimizer = AdamW(bundle.trainable())
        start = 0

    out = Path(output_dir) if output_dir is not None else None
    writer = fh = None
    metrics_path = ckpt_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(cfg.dumps())
        metrics_path = out / "metrics.csv"
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

    rows = []
    try:
        for step in range(start + 1, total + 1):
            t0 = time.perf_counter()
            epoch, idx = batch_indices(cfg, n, step)
            batch = make_batch(dataset.images[idx], cfg, step)
            lr, wd, q = schedules.at(step)
            try:
                rep = train_step(bundle, optimizer, batch, weights, lr, wd, q)
            except ad.NonFiniteError as exc:
                if out is not None:
                    _dump_nonfinite(out / "nonfinite_dump.json", step, lr, wd, q, bundle, batch, exc)
                raise
            wall = (time.perf_counter() - t0) * 1e3 if cfg.run.wall_clock else 0.0
            row = {"step": step, "epoch": epoch, "lr": lr, "wd": wd, "q": q, **asdict(rep),
                   "wall_ms": round(wall, 3)}
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
                fh.flush()
            if log_every and step % log_every == 0:
                log.info("step %d/%d total %.4f ct %.4f nt %.4f cn %.4f", step, total,
                         rep.total, rep.l_ct, rep.l_nt, rep.l_cn)
            every = cfg.train.checkpoint_every
            if out is not None and every and step % every == 0 and step != total:
                save_checkpoint(out / f"checkpoint_{step:06d}.njck",
                                make_checkpoint(cfg, bundle, optimizer, step))
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        ckpt_path = out / "checkpoint_final.njck"
        save_checkpoint(ckpt_path, make_checkpoint(cfg, bundle, optimizer, total))
    return TrainResult(bundle, optimizer, cfg, total, rows, ckpt_path, metrics_path)
