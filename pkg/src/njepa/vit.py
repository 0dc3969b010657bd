"""Vision transformer pieces: patchify, sin-cos position tables, encoders and
the two predictor networks bundled with their mask tokens."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


@dataclass
class EncoderConfig:
    grid_h: int = 8
    grid_w: int = 8
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for 2-D sin-cos embeddings")
        if self.depth < 1:
            raise ValueError("encoder depth must be >= 1")

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class PredictorConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    out_dim: int = 64
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"predictor embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ValueError("predictor embed_dim must be divisible by 4")
        if self.depth < 1:
            raise ValueError("predictor depth must be >= 1")


# -- patches and position tables ---------------------------------------

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, p*p*C) with patches in row-major grid order.

    Each patch vector is laid out (row, col, channel).
    """
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, patch_size: int, grid: tuple[int, int], channels: int) -> np.ndarray:
    b = patches.shape[0]
    gh, gw = grid
    p = patch_size
    x = patches.reshape(b, gh, gw, p, p, channels)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, gh * p, gw * p)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D sin-cos table, one row per patch in row-major order."""
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                             np.arange(grid_w, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)


def key_bias(valid: np.ndarray | None, dtype) -> np.ndarray | None:
    """Additive attention bias (B, 1, 1, T) that hides padded keys."""
    if valid is None:
        return None
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


# -- modules --------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


class Module:
    """Parameter container; discovers Tensors and submodules by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 std: float = 0.02):
        self.weight = Tensor(_trunc_normal(rng, (d_in, d_out), std), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        b, t, d = x.shape
        h = self.heads
        dh = d // h

        def split(y):
            return ad.transpose(ad.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
        if bias is not None:
            scores = ad.add(scores, Tensor(bias))
        attn = ad.softmax(scores, axis=-1)
        out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng, dtype)

    def __call__(self, x: Tensor, bias=None) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x), bias))
        return ad.add(x, self.mlp(self.norm2(x)))


class Encoder(Module):
    """ViT encoder without a class token."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        # fan-in scaled so patch content is not swamped by the unit-amplitude sin-cos table
        self.patch_embed = Linear(cfg.patch_dim, cfg.embed_dim, rng, dtype, std=cfg.patch_dim ** -0.5)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng, dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim, dtype)
        self.pos_embed = sincos_2d(cfg.embed_dim, cfg.grid_h, cfg.grid_w).astype(dtype)

    def __call__(self, patches: np.ndarray, indices: np.ndarray | None = None,
                 valid: np.ndarray | None = None, return_last: int = 0):
        """Encode ``patches`` (B, N, P), optionally only the rows in ``indices``.

        With ``return_last=k`` the normed outputs of the last k blocks are
        returned as a list instead of a single tensor.
        """
        pos = self.pos_embed
        x = np.asarray(patches, dtype=self.pos_embed.dtype)
        if indices is not None:
            rows = np.arange(x.shape[0])[:, None]
            x = x[rows, indices]
            pos = pos[indices]
        h = ad.add(self.patch_embed(Tensor(x)), Tensor(pos))
        bias = key_bias(valid, h.dtype)
        outs = []
        for i, blk in enumerate(self.blocks):
            h = blk(h, bias)
            if return_last and i >= len(self.blocks) - return_last:
                outs.append(self.norm(h))
        if return_last:
            return outs
        return self.norm(h)


class Predictor(Module):
    """Narrow transformer mapping context tokens plus positioned mask tokens
    to predicted target representations."""

    def __init__(self, cfg: PredictorConfig, enc_dim: int, rng, dtype=np.float32):
        if cfg.out_dim != enc_dim:
            raise ValueError(f"predictor out_dim {cfg.out_dim} != encoder dim {enc_dim}")
        self.cfg = cfg
        self.embed = Linear(enc_dim, cfg.embed_dim, rng, dtype)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng, dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim, dtype)
        self.proj = Linear(cfg.embed_dim, enc_dim, rng, dtype)

    def __call__(self, z_ctx: Tensor, psi_target: np.ndarray, mask_token: Tensor,
                 ctx_valid: np.ndarray | None = None, tgt_valid: np.ndarray | None = None,
                 psi_context: np.ndarray | None = None) -> Tensor:
        b, c, _ = z_ctx.shape
        t = psi_target.shape[1]
        ctx = self.embed(z_ctx)
        if psi_context is not None:
            ctx = ad.add(ctx, Tensor(np.asarray(psi_context, dtype=ctx.dtype)))
        tgt = ad.add(Tensor(np.asarray(psi_target, dtype=ctx.dtype)), mask_token)
        x = ad.concat([ctx, tgt], axis=1)
        bias = None
        if ctx_valid is not None or tgt_valid is not None:
            cv = np.ones((b, c), bool) if ctx_valid is None else ctx_valid
            tv = np.ones((b, t), bool) if tgt_valid is None else tgt_valid
            bias = key_bias(np.concatenate([cv, tv], axis=1), x.dtype)
        for blk in self.blocks:
            x = blk(x, bias)
        x = self.norm(x)
        x = ad.take(x, np.arange(c, c + t), axis=1)
        return self.proj(x)


class ModelBundle:
    """Student and teacher encoders, both predictors and their mask tokens."""

    def __init__(self, enc_cfg: EncoderConfig, pred_cfg: PredictorConfig,
                 rng: np.random.Generator, share_predictors: bool = False,
                 share_mask_tokens: bool = False, dtype=np.float32, context_pos: bool = False):
        self.enc_cfg = enc_cfg
        self.context_pos = context_pos
        self.pred_cfg = pred_cfg
        self.share_predictors = share_predictors
        self.share_mask_tokens = share_mask_tokens
        self.dtype = np.dtype(dtype)
        self.student = Encoder(enc_cfg, rng, dtype)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad = False
        self.predictor_c = Predictor(pred_cfg, enc_cfg.embed_dim, rng, dtype)
        self.predictor_n = (self.predictor_c if share_predictors
                            else Predictor(pred_cfg, enc_cfg.embed_dim, rng, dtype))
        self.mask_token_c = Tensor(_trunc_normal(rng, (pred_cfg.embed_dim,)), requires_grad=True, dtype=dtype)
        self.mask_token_n = (self.mask_token_c if share_mask_tokens
                             else Tensor(_trunc_normal(rng, (pred_cfg.embed_dim,)), requires_grad=True, dtype=dtype))
        # position table seen by the predictors; noise is added to its rows
        self.pos_embed = sincos_2d(pred_cfg.embed_dim, enc_cfg.grid_h, enc_cfg.grid_w).astype(dtype)

    def trainable(self) -> list[tuple[str, Tensor]]:
        """Named trainable tensors, each shared tensor listed once."""
        seen: set[int] = set()
        out = []
        groups = [("student.", self.student), ("predictor_c.", self.predictor_c),
                  ("predictor_n.", self.predictor_n)]
        for prefix, mod in groups:
            for name, p in mod.named_parameters(prefix):
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append((name, p))
        for name, p in (("mask_token_c", self.mask_token_c), ("mask_token_n", self.mask_token_n)):
            if id(p) not in seen:
                seen.add(id(p))
                out.append((name, p))
        return out

    def named_state(self) -> list[tuple[str, Tensor]]:
        return self.trainable() + list(self.teacher.named_parameters("teacher."))

    def zero_grad(self) -> None:
        for _, p in self.named_state():
            p.zero_grad()


def encode_teacher(bundle: ModelBundle, patches: np.ndarray) -> Tensor:
    with ad.no_grad():
        return bundle.teacher(patches)


def encode_student(bundle: ModelBundle, patches: np.ndarray, context_indices: np.ndarray,
                   valid: np.ndarray | None = None) -> Tensor:
    context_indices = np.asarray(context_indices)
    if context_indices.ndim == 1:
        context_indices = np.broadcast_to(context_indices, (patches.shape[0], context_indices.size))
    if context_indices.shape[1] == 0:
        raise ValueError("empty context")
    return bundle.student(patches, context_indices, valid)


def predict(bundle: ModelBundle, which: str, z_s: Tensor, psi_target: np.ndarray,
            ctx_valid: np.ndarray | None = None, tgt_valid: np.ndarray | None = None,
            target_indices: np.ndarray | None = None, psi_context: np.ndarray | None = None) -> Tensor:
    """Run the context (``which='context'``) or noise predictor.

    ``psi_target`` holds one position-embedding row per target token,
    shape (B, T, predictor_dim); for the noise predictor these rows already
    carry the noise.  ``psi_context`` (B, C, predictor_dim), when given, is
    added to the projected context tokens.
    """
    if which == "context":
        net, token = bundle.predictor_c, bundle.mask_token_c
    elif which == "noise":
        net, token = bundle.predictor_n, bundle.mask_token_n
    else:
        raise ValueError(f"unknown predictor {which!r}")
    psi_target = np.asarray(psi_target)
    if psi_target.ndim != 3 or psi_target.shape[0] != z_s.shape[0]:
        raise ValueError(f"psi_target shape {psi_target.shape} does not match context batch {z_s.shape}")
    if target_indices is not None and np.shape(target_indices)[-1] != psi_target.shape[1]:
        raise ValueError(f"{psi_target.shape[1]} psi rows for {np.shape(target_indices)[-1]} target tokens")
    if tgt_valid is not None and tgt_valid.shape != psi_target.shape[:2]:
        raise ValueError("target validity mask does not match psi_target rows")
    if psi_target.shape[2] != bundle.pred_cfg.embed_dim:
        raise ValueError(f"psi_target width {psi_target.shape[2]} != predictor dim")
    if psi_context is not None and np.shape(psi_context) != (*z_s.shape[:2], psi_target.shape[2]):
        raise ValueError(f"psi_context shape {np.shape(psi_context)} does not match context tokens")
    return net(z_s, psi_target, token, ctx_valid, tgt_valid, psi_context)
