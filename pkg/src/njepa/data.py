"""Datasets: a versioned binary container, image directories, and a
procedural oriented-grating dataset for desk-scale runs.

Container layout (little-endian)::

    magic     8 bytes   b"NJDSET\\x00\\x00"
    version   u32       1
    count     u32
    channels  u32
    height    u32
    width     u32
    labels    u8        1 if a label block follows
    pad       3 bytes
    pixels    f32[count * channels * height * width]   (N, C, H, W order)
    labels    i64[count]                               (optional)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"NJDSET\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIB3x")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalised
    labels: np.ndarray | None
    split: str
    mean: np.ndarray  # per-channel constants used for normalisation
    std: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, idx: np.ndarray) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.split, self.mean, self.std)


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = raw.mean(axis=(0, 2, 3), dtype=np.float64)
    std = raw.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(raw: np.ndarray, labels, split: str, stats=None) -> Dataset:
    """Per-channel zero mean / unit variance; ``stats`` reuses training constants."""
    raw = np.asarray(raw, dtype=np.float32)
    if raw.ndim != 4:
        raise DatasetFormatError(f"expected (N, C, H, W) images, got shape {raw.shape}")
    if raw.shape[0] == 0:
        raise DatasetFormatError("dataset is empty")
    mean, std = channel_stats(raw) if stats is None else (np.asarray(stats[0], np.float32),
                                                           np.asarray(stats[1], np.float32))
    images = (raw - mean[None, :, None, None]) / std[None, :, None, None]
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    if lab is not None and lab.shape != (raw.shape[0],):
        raise DatasetFormatError("label count does not match image count")
    return Dataset(images.astype(np.float32), lab, split, mean, std)


# -- container ----------------------------------------------------------

def write_container(path: str | Path, images: np.ndarray, labels: np.ndarray | None = None) -> None:
    images = np.ascontiguousarray(images, dtype="<f4")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, int(labels is not None)))
        fh.write(images.tobytes())
        if labels is not None:
            lab = np.ascontiguousarray(labels, dtype="<i8")
            if lab.shape != (n,):
                raise DatasetFormatError("label count does not match image count")
            fh.write(lab.tobytes())


def read_container(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Raw (unnormalised) pixels and labels from a container file."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, c, h, w, has_labels = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported container version {version}")
    npix = n * c * h * w
    expect = _HEADER.size + 4 * npix + (8 * n if has_labels else 0)
    if len(blob) != expect:
        raise DatasetFormatError(f"{path}: size {len(blob)} != expected {expect}")
    pixels = np.frombuffer(blob, dtype="<f4", count=npix, offset=_HEADER.size)
    images = pixels.reshape(n, c, h, w).astype(np.float32)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i8", count=n, offset=_HEADER.size + 4 * npix).astype(np.int64)
    return images, labels


def _read_image_dir(root: Path) -> tuple[np.ndarray, np.ndarray | None]:
    from PIL import Image

    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetFormatError(f"{root}: no images found")
    suffixes = {p.suffix.lower() for p in files}
    if len(suffixes) > 1:
        raise DatasetFormatError(f"{root}: mixed raster formats {sorted(suffixes)}")
    classes = sorted({p.parent.relative_to(root).as_posix() for p in files})
    labelled = classes != ["."]
    arrays, labels = [], []
    for p in files:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        arrays.append(arr.transpose(2, 0, 1))
        labels.append(classes.index(p.parent.relative_to(root).as_posix()))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{root}: inconsistent image dimensions {sorted(shapes)}")
    return np.stack(arrays), (np.asarray(labels) if labelled else None)


def load_dataset(path: str | Path, split: str = "train", stats=None) -> Dataset:
    """Load a container file or an image directory (one subdirectory per class)."""
    path = Path(path)
    if path.is_dir():
        raw, labels = _read_image_dir(path)
    elif path.exists():
        raw, labels = read_container(path)
    else:
        raise FileNotFoundError(path)
    return normalize(raw, labels, split, stats)


# -- synthetic gratings ---------------------------------------------------

def synthetic_raw(seed: int, n_per_class: int, classes: int, size: int = 32,
                  phase_span: float = 1.5 * np.pi, noise: float = 0.35):
    """Oriented gratings, one orientation band per class.

    Frequency, phase, contrast, per-channel colour and pixel noise are
    jittered per sample, so colour statistics alone do not reveal the class.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    n = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    band = np.pi / classes
    angle = labels * band + rng.uniform(-0.25, 0.25, n) * band
    freq = rng.uniform(2.0, 4.0, n)
    phase = rng.uniform(0.0, phase_span, n)
    contrast = rng.uniform(0.6, 1.0, n)
    colour = rng.uniform(0.3, 1.0, (n, 3))
    offset = rng.uniform(-0.3, 0.3, (n, 3))
    proj = np.cos(angle)[:, None, None] * xx + np.sin(angle)[:, None, None] * yy
    wave = contrast[:, None, None] * np.cos(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    images = colour[:, :, None, None] * wave[:, None] + offset[:, :, None, None]
    images = images + noise * rng.standard_normal(images.shape)
    return images.astype(np.float32), labels.astype(np.int64)


def make_synthetic(seed: int, n_per_class: int, classes: int, size: int = 32,
                   split: str = "train", stats=None) -> Dataset:
    raw, labels = synthetic_raw(seed, n_per_class, classes, size)
    return normalize(raw, labels, split, stats)
