"""EDM-style additive noise on the position embeddings of masked tokens."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("multi_level", "single_level", "fixed_sigma", "off")


@dataclass
class NoiseParams:
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    mode: str = "multi_level"

    def __post_init__(self):
        if self.p_std <= 0:
            raise ValueError("p_std must be positive")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}; expected one of {MODES}")


@dataclass
class NoiseDraw:
    sigma: float
    n: np.ndarray


def sample_sigma(rng: np.random.Generator, params: NoiseParams) -> float:
    """ln(sigma) ~ N(p_mean, p_std^2); constant in fixed_sigma mode, 0 when off."""
    if params.mode == "off":
        return 0.0
    if params.mode == "fixed_sigma":
        return float(params.sigma_data)
    return float(np.exp(rng.normal(params.p_mean, params.p_std)))


def draw_block_noise(rng: np.random.Generator, sigma: float, rows: int, dim: int,
                     dtype=np.float64) -> NoiseDraw:
    if rows < 1:
        raise ValueError("a noise draw needs at least one row")
    if sigma == 0.0:
        return NoiseDraw(0.0, np.zeros((rows, dim), dtype=dtype))
    n = (rng.standard_normal((rows, dim)) * sigma).astype(dtype)
    return NoiseDraw(float(sigma), n)


def apply_noise(psi_block: np.ndarray, draw: NoiseDraw) -> np.ndarray:
    """psi + n, leaving ``psi_block`` untouched."""
    psi_block = np.asarray(psi_block)
    if psi_block.shape != draw.n.shape:
        raise ValueError(f"position rows {psi_block.shape} vs noise {draw.n.shape}")
    return psi_block + draw.n


def draw_batch_noise(rng: np.random.Generator, params: NoiseParams,
                     block_rows: np.ndarray, dim: int, dtype=np.float32):
    """Noise for a padded batch of target blocks.

    ``block_rows`` (B, L) gives each block's token count.  Returns sigmas
    (B, L) and noise (B, L, T, dim) with T = max rows, zero on padded rows.
    multi_level draws (sigma, n) per block; single_level draws once per
    image and reuses it for every block of that image.
    """
    block_rows = np.asarray(block_rows)
    b, nblk = block_rows.shape
    tmax = int(block_rows.max())
    sigmas = np.zeros((b, nblk))
    noise = np.zeros((b, nblk, tmax, dim), dtype=dtype)
    if params.mode == "off":
        return sigmas, noise
    for i in range(b):
        if params.mode == "single_level":
            sigma = sample_sigma(rng, params)
            shared = draw_block_noise(rng, sigma, int(block_rows[i].max()), dim, dtype)
        for j in range(nblk):
            rows = int(block_rows[i, j])
            if params.mode == "single_level":
                draw = NoiseDraw(shared.sigma, shared.n[:rows])
            else:
                draw = draw_block_noise(rng, sample_sigma(rng, params), rows, dim, dtype)
            sigmas[i, j] = draw.sigma
            noise[i, j, :rows] = draw.n
    return sigmas, noise
