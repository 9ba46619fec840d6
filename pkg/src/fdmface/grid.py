"""Block grid over an aligned face and mapping of occlusion regions to blocks.

Blocks are numbered 1..n*n in row-major order. Remainder pixels of a
non-divisible dimension go to the last row / column of blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

Rect = Tuple[int, int, int, int]  # (top, left, bottom, right), bottom/right exclusive


@dataclass(frozen=True)
class GridSpec:
    image_height: int
    image_width: int
    n: int = 5

    def __post_init__(self):
        if self.image_height <= 0 or self.image_width <= 0:
            raise ValueError(
                f"image dimensions must be positive, got {self.image_height}x{self.image_width}"
            )
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.n > min(self.image_height, self.image_width):
            raise ValueError(f"n={self.n} exceeds image size {self.image_height}x{self.image_width}")

    @property
    def num_blocks(self) -> int:
        return self.n * self.n

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image_height, self.image_width

    def block_ids(self) -> range:
        return range(1, self.num_blocks + 1)

    def row_col(self, block: int) -> Tuple[int, int]:
        """1-based (row, col) of a block id."""
        self._check(block)
        return (block - 1) // self.n + 1, (block - 1) % self.n + 1

    def block_at(self, row: int, col: int) -> int:
        return (row - 1) * self.n + col

    def row_edges(self) -> np.ndarray:
        return _edges(self.image_height, self.n)

    def col_edges(self) -> np.ndarray:
        return _edges(self.image_width, self.n)

    def block_rect(self, block: int) -> Rect:
        row, col = self.row_col(block)
        r, c = self.row_edges(), self.col_edges()
        return int(r[row - 1]), int(c[col - 1]), int(r[row]), int(c[col])

    def block_area(self, block: int) -> int:
        top, left, bottom, right = self.block_rect(block)
        return (bottom - top) * (right - left)

    def is_central(self, block: int) -> bool:
        """Interior blocks, i.e. rows and columns 2..n-1 (the 3x3 centre when n=5)."""
        row, col = self.row_col(block)
        return 1 < row < self.n and 1 < col < self.n

    def central_blocks(self) -> Tuple[int, ...]:
        return tuple(b for b in self.block_ids() if self.is_central(b))

    def neighbors4(self, block: int) -> Tuple[int, ...]:
        row, col = self.row_col(block)
        out = []
        for dr, dc in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            r, c = row + dr, col + dc
            if 1 <= r <= self.n and 1 <= c <= self.n:
                out.append(self.block_at(r, c))
        return tuple(sorted(out))

    def label_map(self) -> np.ndarray:
        """H x W array holding the block id of every pixel."""
        rows = np.searchsorted(self.row_edges()[1:], np.arange(self.image_height), side="right")
        cols = np.searchsorted(self.col_edges()[1:], np.arange(self.image_width), side="right")
        return (rows[:, None] * self.n + cols[None, :] + 1).astype(np.int32)

    def block_mask(self, blocks: Iterable[int]) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for b in blocks:
            top, left, bottom, right = self.block_rect(b)
            mask[top:bottom, left:right] = True
        return mask

    def _check(self, block: int) -> None:
        if not 1 <= int(block) <= self.num_blocks:
            raise ValueError(f"block id {block} outside [1, {self.num_blocks}]")


def _edges(length: int, n: int) -> np.ndarray:
    step = length // n
    edges = np.arange(n + 1) * step
    edges[-1] = length
    return edges


def make_grid(image_height: int, image_width: int, n: int = 5) -> GridSpec:
    return GridSpec(int(image_height), int(image_width), int(n))


def block_fractions(region: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Occluded fraction of every block, indexed by block id - 1."""
    region = np.asarray(region)
    if region.shape != grid.shape:
        raise ValueError(f"region shape {region.shape} does not match grid {grid.shape}")
    occ = region.astype(bool)
    out = np.empty(grid.num_blocks, dtype=np.float64)
    for b in grid.block_ids():
        top, left, bottom, right = grid.block_rect(b)
        out[b - 1] = occ[top:bottom, left:right].sum() / ((bottom - top) * (right - left))
    return out


def region_to_blocks(region: np.ndarray, grid: GridSpec, iou_threshold: float = 0.5) -> frozenset:
    """Blocks whose occluded fraction (|region & block| / |block|) reaches the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    fractions = block_fractions(region, grid)
    return frozenset(int(i) + 1 for i in np.flatnonzero(fractions >= iou_threshold))
