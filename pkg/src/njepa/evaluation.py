"""Frozen-encoder evaluation: feature extraction, linear probe, low-shot
subsampling and collapse diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .masking import round_half_up
from .trainer import substream
from .vit import ModelBundle, patchify

FEATURE_SOURCES = ("last_layer_avg", "concat_last_k")
RESULT_COLUMNS = ("checkpoint", "feature_source", "label_fraction", "seed", "top1")


class ProbeError(ValueError):
    pass


@dataclass
class ProbeConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    label_fraction: float = 1.0
    feature_source: str = "last_layer_avg"
    last_k: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.feature_source not in FEATURE_SOURCES:
            raise ProbeError(f"feature_source must be one of {FEATURE_SOURCES}")
        if not 0 < self.label_fraction <= 1:
            raise ProbeError("label_fraction must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ProbeError("epochs and batch_size must be >= 1")

    @classmethod
    def from_run(cls, cfg) -> "ProbeConfig":
        p = cfg.probe
        return cls(p.epochs, p.batch_size, p.lr, p.momentum, p.label_fraction,
                   p.feature_source, p.last_k, cfg.run.seed)


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray | None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ProbeError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ProbeError("label count does not match feature rows")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "FeatureMatrix":
        labels = None if self.labels is None else self.labels[idx]
        return FeatureMatrix(self.features[idx], labels)


# -- features -----------------------------------------------------------

def extract_features(bundle: ModelBundle, dataset: Dataset, source: str = "last_layer_avg",
                     last_k: int = 4, encoder: str = "student", batch_size: int = 128) -> FeatureMatrix:
    """Average-pooled encoder outputs over all N patches, no graph recorded.

    ``concat_last_k`` pools each of the last k blocks (after the final norm)
    and concatenates them in block order.
    """
    if len(dataset) == 0:
        raise ProbeError("empty dataset")
    if source not in FEATURE_SOURCES:
        raise ProbeError(f"unknown feature source {source!r}")
    if encoder not in ("student", "teacher"):
        raise ProbeError("encoder must be student or teacher")
    enc = bundle.student if encoder == "student" else bundle.teacher
    k = 1 if source == "last_layer_avg" else int(last_k)
    if not 1 <= k <= len(enc.blocks):
        raise ProbeError(f"last_k={k} outside 1..{len(enc.blocks)}")
    p = enc.cfg.patch_size
    chunks = []
    with ad.no_grad():
        for lo in range(0, len(dataset), batch_size):
            patches = patchify(dataset.images[lo:lo + batch_size], p)
            outs = enc(patches, return_last=k)
            chunks.append(np.concatenate([o.data.mean(axis=1) for o in outs], axis=1))
    return FeatureMatrix(np.concatenate(chunks).astype(np.float64), dataset.labels)


def pixel_features(dataset: Dataset) -> FeatureMatrix:
    """Flattened normalised pixels, the raw-input control."""
    return FeatureMatrix(dataset.images.reshape(len(dataset), -1), dataset.labels)


# -- linear probe -------------------------------------------------------

def _softmax_xent_grad(logits: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return (p - onehot) / logits.shape[0]


@dataclass
class LinearClassifier:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.decision_function(x).argmax(axis=1)


def fit_linear(x: np.ndarray, y: np.ndarray, num_classes: int, cfg: ProbeConfig) -> LinearClassifier:
    """Multinomial logistic regression, SGD with momentum and a cosine lr.

    Features are standardised with training statistics; no weight decay.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    if len(np.unique(y)) < 2:
        raise ProbeError("linear probe needs at least 2 classes in the training split")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    xs = (x - mean) / std
    onehot = np.eye(num_classes)[y]
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    bs = min(cfg.batch_size, n)
    per_epoch = -(-n // bs)
    total = cfg.epochs * per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        perm = substream(cfg.seed, "probe", epoch).permutation(n)
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / total))
            g = _softmax_xent_grad(xs[idx] @ w + b, onehot[idx])
            vw = cfg.momentum * vw + xs[idx].T @ g
            vb = cfg.momentum * vb + g.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
            step += 1
    return LinearClassifier(w, b, mean, std)


def linear_probe(train: FeatureMatrix, test: FeatureMatrix, cfg: ProbeConfig | None = None) -> float:
    """Held-out top-1 of a linear classifier trained on frozen features."""
    cfg = cfg or ProbeConfig()
    if train.labels is None or test.labels is None:
        raise ProbeError("linear probe needs labelled features")
    if train.features.shape[1] != test.features.shape[1]:
        raise ProbeError("train and test feature dims differ")
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    clf = fit_linear(train.features, train.labels, num_classes, cfg)
    return float((clf.predict(test.features) == test.labels).mean())


# -- low-shot -----------------------------------------------------------

def stratified_subsample(labels: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Sorted indices keeping round-half-up(fraction * class size) per class."""
    if not 0 < fraction <= 1:
        raise ProbeError("fraction must lie in (0, 1]")
    labels = np.asarray(labels)
    rng = substream(seed, "probe", 1 << 20)
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = min(round_half_up(fraction * len(members)), len(members))
        if k < 1:
            raise ProbeError(f"fraction {fraction} leaves no samples of class {int(c)}")
        keep.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(keep))


def low_shot_eval(bundle: ModelBundle, train: Dataset, test: Dataset, fraction: float,
                  cfg: ProbeConfig | None = None, encoder: str = "student") -> float:
    cfg = cfg or ProbeConfig()
    if train.labels is None:
        raise ProbeError("low-shot evaluation needs labels")
    idx = stratified_subsample(train.labels, fraction, cfg.seed)
    ftrain = extract_features(bundle, train.subset(idx), cfg.feature_source, cfg.last_k, encoder)
    ftest = extract_features(bundle, test, cfg.feature_source, cfg.last_k, encoder)
    return linear_probe(ftrain, ftest, cfg)


# -- collapse diagnostics ------------------------------------------------

@dataclass
class RepresentationStats:
    dim_std: np.ndarray
    mean_cosine: float
    effective_rank: float

    def fraction_active(self, threshold: float = 1e-3) -> float:
        return float((self.dim_std > threshold).mean())


def representation_stats(features) -> RepresentationStats:
    """Per-dimension std, mean off-diagonal cosine and effective rank.

    Effective rank is exp(entropy) of the normalised singular values of the
    centred feature matrix (0 when all rows coincide).
    """
    x = np.asarray(getattr(features, "features", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ProbeError("representation_stats needs a 2-D matrix with >= 2 rows")
    n = x.shape[0]
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / np.where(norms > 0, norms, 1.0)
    gram = unit @ unit.T
    # zero rows have no direction; treat them as identical to everything
    zero = norms[:, 0] == 0
    gram[zero, :] = 1.0
    gram[:, zero] = 1.0
    cos = (gram.sum() - np.trace(gram)) / (n * (n - 1))
    s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    total = s.sum()
    if total <= 1e-12 * max(1.0, np.abs(x).max()):
        erank = 0.0
    else:
        p = s / total
        p = p[p > 0]
        erank = float(np.exp(-(p * np.log(p)).sum()))
    return RepresentationStats(x.std(axis=0), float(cos), erank)


# -- results file -------------------------------------------------------

def append_result(path: str | Path, checkpoint: str, source: str, fraction: float,
                  seed: int, top1: float) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(RESULT_COLUMNS)
        w.writerow([checkpoint, source, repr(float(fraction)), int(seed), repr(float(top1))])
