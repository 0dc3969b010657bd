"""Prediction (smooth-L1 on token-difference norms) and denoise losses.

The per-block functions take lists of (tokens, dim) tensors, one per target
block.  The ``batched_*`` variants work on padded (B, L, T, D) tensors with
a validity mask and are what the trainer calls.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    elementwise: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    l_ct: float
    l_nt: float
    l_cn: float
    total: float


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def smooth_l1_tokens(diff: Tensor) -> Tensor:
    """Per-token smooth-L1 of the difference norm, reduced over the last axis."""
    sq = ad.sum(ad.square(diff), axis=-1)
    d = ad.l2_norm(diff, axis=-1)
    return ad.where(d.data < 1.0, ad.scale(sq, 0.5), ad.sub(d, 0.5))


def smooth_l1_elementwise(diff: Tensor) -> Tensor:
    """Per-token mean of the usual elementwise smooth-L1 (beta = 1)."""
    a = np.abs(diff.data)
    inner = ad.where(a < 1.0, ad.scale(ad.square(diff), 0.5), ad.sub(ad.absolute(diff), 0.5))
    return ad.mean(inner, axis=-1)


def smooth_l1_block(pred: Tensor, target: Tensor, elementwise: bool = False) -> Tensor:
    _same_shape(pred, target)
    fn = smooth_l1_elementwise if elementwise else smooth_l1_tokens
    return ad.mean(fn(ad.sub(pred, target)))


def _prediction_loss(preds: Sequence[Tensor], targets: Sequence[Tensor], elementwise=False) -> Tensor:
    if len(preds) == 0:
        raise ValueError("no target blocks")
    if len(preds) != len(targets):
        raise ValueError("prediction and target block counts differ")
    terms = [smooth_l1_block(p, t, elementwise) for p, t in zip(preds, targets)]
    return ad.scale(_stack_sum(terms), 1.0 / len(terms))


def _stack_sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def loss_ct(predictions_c: Sequence[Tensor], targets: Sequence[Tensor], elementwise=False) -> Tensor:
    return _prediction_loss(predictions_c, targets, elementwise)


def loss_nt(predictions_n: Sequence[Tensor], targets: Sequence[Tensor], elementwise=False) -> Tensor:
    return _prediction_loss(predictions_n, targets, elementwise)


def loss_cn(predictions_n: Sequence[Tensor], predictions_c: Sequence[Tensor]) -> Tensor:
    """Block average of the token-summed squared distance between branches."""
    if len(predictions_n) == 0:
        raise ValueError("no target blocks")
    if len(predictions_n) != len(predictions_c):
        raise ValueError("block counts differ")
    terms = []
    for zn, zc in zip(predictions_n, predictions_c):
        _same_shape(zn, zc)
        terms.append(ad.sum(ad.square(ad.sub(zn, zc))))
    return ad.scale(_stack_sum(terms), 1.0 / len(terms))


def total_loss(l_ct, l_nt, l_cn, weights: LossWeights):
    if isinstance(l_ct, Tensor):
        return ad.add(l_ct, ad.add(ad.scale(l_nt, weights.lambda1), ad.scale(l_cn, weights.lambda2)))
    return l_ct + weights.lambda1 * l_nt + weights.lambda2 * l_cn


# -- padded batch versions ------------------------------------------------

def batched_prediction_loss(pred: Tensor, target: Tensor, valid: np.ndarray,
                            elementwise: bool = False) -> Tensor:
    """Mean over images of (1/L) sum_blocks mean_tokens smooth-L1.

    pred, target: (B, L, T, D); valid: (B, L, T) with >= 1 valid token per block.
    """
    _same_shape(pred, target)
    fn = smooth_l1_elementwise if elementwise else smooth_l1_tokens
    per_token = fn(ad.sub(pred, target))
    counts = valid.sum(axis=-1, keepdims=True).astype(pred.dtype)
    weights = (valid / counts) / (valid.shape[0] * valid.shape[1])
    return ad.sum(ad.mul(per_token, Tensor(weights.astype(pred.dtype))))


def batched_denoise_loss(pred_n: Tensor, pred_c: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over images of (1/L) sum_blocks sum_tokens ||zn - zc||^2."""
    _same_shape(pred_n, pred_c)
    per_token = ad.sum(ad.square(ad.sub(pred_n, pred_c)), axis=-1)
    weights = valid / (valid.shape[0] * valid.shape[1])
    return ad.sum(ad.mul(per_token, Tensor(weights.astype(pred_n.dtype))))
