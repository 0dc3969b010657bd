"""Multi-block mask sampling: L target blocks and one context block with the
target patches removed, drawn independently per image."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TARGET_SCALE = (0.15, 0.2)
TARGET_ASPECT = (0.75, 1.5)
CONTEXT_SCALE = (0.85, 1.0)
MAX_RETRIES = 16


class MaskingError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    top: int
    left: int
    height: int
    width: int

    def indices(self, grid_w: int) -> np.ndarray:
        rows = np.arange(self.top, self.top + self.height)
        cols = np.arange(self.left, self.left + self.width)
        return (rows[:, None] * grid_w + cols[None, :]).reshape(-1)

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass
class MaskLayout:
    target_blocks: list[BlockSpec]
    context_indices: np.ndarray
    image_id: int = 0
    context_block: BlockSpec | None = None
    retries: int = 0

    def target_indices(self, grid_w: int) -> list[np.ndarray]:
        return [blk.indices(grid_w) for blk in self.target_blocks]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def block_dims(scale: float, aspect: float, grid: tuple[int, int]) -> tuple[int, int]:
    """Block height/width for a scale and aspect ratio, clamped to the grid."""
    gh, gw = grid
    n = gh * gw
    h = round_half_up(math.sqrt(scale * n * aspect))
    w = round_half_up(math.sqrt(scale * n / aspect))
    return min(max(h, 1), gh), min(max(w, 1), gw)


def _check_grid(grid) -> tuple[int, int]:
    gh, gw = int(grid[0]), int(grid[1])
    if gh * gw < 4:
        raise ValueError(f"grid {gh}x{gw} has fewer than 4 patches")
    return gh, gw


def _place(rng: np.random.Generator, grid, h: int, w: int) -> BlockSpec:
    gh, gw = grid
    top = int(rng.integers(0, gh - h + 1))
    left = int(rng.integers(0, gw - w + 1))
    return BlockSpec(top, left, h, w)


def sample_target_block(rng: np.random.Generator, grid, scale_range=TARGET_SCALE,
                        aspect_range=TARGET_ASPECT) -> BlockSpec:
    grid = _check_grid(grid)
    s = rng.uniform(*scale_range)
    r = rng.uniform(*aspect_range)
    h, w = block_dims(s, r, grid)
    return _place(rng, grid, h, w)


def sample_context_block(rng: np.random.Generator, grid, scale_range=CONTEXT_SCALE,
                         aspect: float = 1.0) -> BlockSpec:
    grid = _check_grid(grid)
    s = rng.uniform(*scale_range)
    h, w = block_dims(s, aspect, grid)
    return _place(rng, grid, h, w)


def build_layout(rng: np.random.Generator, grid, num_targets: int = 4,
                 target_scale=TARGET_SCALE, target_aspect=TARGET_ASPECT,
                 context_scale=CONTEXT_SCALE, max_retries: int = MAX_RETRIES,
                 image_id: int = 0) -> MaskLayout:
    """Sample targets, then a context block; resample the context while the
    target removal leaves it empty."""
    grid = _check_grid(grid)
    gw = grid[1]
    targets = [sample_target_block(rng, grid, target_scale, target_aspect)
               for _ in range(num_targets)]
    covered = np.zeros(grid[0] * gw, dtype=bool)
    for blk in targets:
        covered[blk.indices(gw)] = True
    for attempt in range(max_retries):
        ctx = sample_context_block(rng, grid, context_scale)
        keep = np.zeros_like(covered)
        keep[ctx.indices(gw)] = True
        keep &= ~covered
        if keep.any():
            return MaskLayout(targets, np.flatnonzero(keep), image_id, ctx, attempt)
    raise MaskingError(f"context empty after {max_retries} context draws on grid {grid}")


def sample_layouts(rng: np.random.Generator, grid, batch_size: int, **kwargs) -> list[MaskLayout]:
    return [build_layout(rng, grid, image_id=i, **kwargs) for i in range(batch_size)]


@dataclass
class MaskBatch:
    """Per-batch padded index arrays.

    context_idx (B, C) / context_valid (B, C); target_idx (B, L, T) /
    target_valid (B, L, T).  Padded slots point at patch 0 and are invalid.
    """
    context_idx: np.ndarray
    context_valid: np.ndarray
    target_idx: np.ndarray
    target_valid: np.ndarray
    layouts: list[MaskLayout] = field(default_factory=list)

    @property
    def num_targets(self) -> int:
        return self.target_idx.shape[1]


def collate(layouts: list[MaskLayout], grid) -> MaskBatch:
    gw = grid[1]
    b = len(layouts)
    n_targets = {len(lay.target_blocks) for lay in layouts}
    if len(n_targets) != 1:
        raise ValueError("layouts disagree on the number of target blocks")
    nt = n_targets.pop()
    cmax = max(lay.context_indices.size for lay in layouts)
    tmax = max(blk.area for lay in layouts for blk in lay.target_blocks)
    ctx = np.zeros((b, cmax), dtype=np.intp)
    cval = np.zeros((b, cmax), dtype=bool)
    tgt = np.zeros((b, nt, tmax), dtype=np.intp)
    tval = np.zeros((b, nt, tmax), dtype=bool)
    for i, lay in enumerate(layouts):
        k = lay.context_indices.size
        ctx[i, :k] = lay.context_indices
        cval[i, :k] = True
        for j, idx in enumerate(lay.target_indices(gw)):
            tgt[i, j, :idx.size] = idx
            tval[i, j, :idx.size] = True
    return MaskBatch(ctx, cval, tgt, tval, list(layouts))


def render_layout(layout: MaskLayout, grid) -> str:
    """One character per patch: 'o' context, '1'-'9' first covering target,
    '.' dropped (neither context nor target)."""
    gh, gw = grid
    cells = np.full(gh * gw, ".", dtype="<U1")
    cells[layout.context_indices] = "o"
    for j in reversed(range(len(layout.target_blocks))):
        cells[layout.target_blocks[j].indices(gw)] = str(j + 1) if j < 9 else "+"
    return "\n".join("".join(cells[r * gw:(r + 1) * gw]) for r in range(gh))
