"""Occluder corpus and synthetic occlusion of aligned faces.

Faces are arrays shaped (C, H, W) or (H, W). An occlusion region is a
boolean (H, W) array, True on occluded pixels.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import FaceDataset, read_image, write_image
from .grid import GridSpec, Rect

TEXTURE_KINDS = ("solid", "stripes", "checker", "noise", "smooth")
SPRITE_KINDS = ("sunglasses", "scarf")


@dataclass
class Texture:
    texture_id: str
    pixels: np.ndarray  # (h, w) float32 in [0, 1]
    alpha: Optional[np.ndarray] = None  # (h, w) bool; None means opaque rectangle
    split: str = "train"

    @property
    def is_sprite(self) -> bool:
        return self.alpha is not None

    def render(self, height: int, width: int):
        """Pixels and coverage for a placement of the given size.

        Sprites are rescaled (nearest neighbour) to the placement; plain
        textures are tiled from their top-left corner.
        """
        if self.alpha is not None:
            rows = np.arange(height) * self.pixels.shape[0] // height
            cols = np.arange(width) * self.pixels.shape[1] // width
            return self.pixels[np.ix_(rows, cols)], self.alpha[np.ix_(rows, cols)]
        th, tw = self.pixels.shape
        reps = (-(-height // th), -(-width // tw))
        return np.tile(self.pixels, reps)[:height, :width], np.ones((height, width), dtype=bool)


@dataclass(frozen=True)
class OccluderSpec:
    texture_id: str
    placement_rect: Rect  # (top, left, bottom, right), exclusive ends


def split_for(texture_id: str, test_fraction: float = 0.25) -> str:
    """Deterministic train/test assignment by id hash."""
    return "test" if zlib.crc32(texture_id.encode()) % 1000 < test_fraction * 1000 else "train"


def make_texture(kind: str, rng: np.random.Generator, size: int = 48) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float32)
    if kind == "solid":
        tex = np.full((size, size), rng.uniform(0.0, 1.0))
    elif kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 10.0)
        phase = np.cos(theta) * x + np.sin(theta) * y
        lo, hi = np.sort(rng.uniform(0, 1, size=2))
        tex = np.where(np.sin(2 * np.pi * phase / period) > 0, hi, lo)
    elif kind == "checker":
        cell = int(rng.integers(2, 7))
        lo, hi = np.sort(rng.uniform(0, 1, size=2))
        tex = np.where(((y // cell) + (x // cell)) % 2 == 0, hi, lo)
    elif kind == "noise":
        tex = rng.uniform(0, 1, size=(size, size))
    elif kind == "smooth":
        tex = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(1.5, 4.0), mode="wrap")
        tex = 0.5 + 0.25 * tex / (tex.std() + 1e-8)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.clip(tex, 0, 1).astype(np.float32)


def make_sprite(kind: str, rng: np.random.Generator, size: int = 48):
    """Sunglasses-like (two lenses and a bridge) or scarf-like (lower band) sprite."""
    v, u = (np.mgrid[0:size, 0:size].astype(np.float32) + 0.5) / size
    if kind == "sunglasses":
        rx, ry = rng.uniform(0.22, 0.245), rng.uniform(0.42, 0.48)
        lens = lambda cx: ((u - cx) / rx) ** 4 + ((v - 0.5) / ry) ** 4 <= 1.0  # noqa: E731
        alpha = lens(0.25) | lens(0.75) | ((np.abs(v - 0.4) < 0.1) & (u > 0.25) & (u < 0.75))
        pixels = np.full((size, size), rng.uniform(0.0, 0.2)) + rng.normal(0, 0.02, (size, size))
    elif kind == "scarf":
        edge = 0.15 + 0.1 * np.sin(2 * np.pi * (u * rng.uniform(1, 3) + rng.uniform(0, 1)))
        alpha = v >= edge
        pixels = make_texture(str(rng.choice(["stripes", "checker", "smooth"])), rng, size)
    else:
        raise ValueError(f"unknown sprite kind {kind!r}")
    return np.clip(pixels, 0, 1).astype(np.float32), alpha


class OccluderCorpus:
    """Collection of occluder textures partitioned into train and test splits."""

    def __init__(self, textures: Dict[str, Texture]):
        self.textures = dict(textures)

    def __len__(self):
        return len(self.textures)

    def __contains__(self, texture_id):
        return texture_id in self.textures

    @classmethod
    def procedural(cls, per_kind: int = 12, sprites_per_kind: int = 6, seed: int = 0,
                   test_fraction: float = 0.25) -> "OccluderCorpus":
        rng = np.random.default_rng(seed)
        textures = {}
        for kind in TEXTURE_KINDS:
            for i in range(per_kind):
                tid = f"tex-{kind}-{i:03d}"
                textures[tid] = Texture(tid, make_texture(kind, rng), None, split_for(tid, test_fraction))
        for kind in SPRITE_KINDS:
            for i in range(sprites_per_kind):
                tid = f"sprite-{kind}-{i:03d}"
                pixels, alpha = make_sprite(kind, rng)
                textures[tid] = Texture(tid, pixels, alpha, split_for(tid, test_fraction))
        return cls(textures)

    def get(self, texture_id: str) -> Texture:
        try:
            return self.textures[texture_id]
        except KeyError:
            raise FileNotFoundError(f"occluder texture {texture_id!r} not in corpus") from None

    def ids(self, split: Optional[str] = None, sprites: Optional[bool] = None,
            prefix: str = "") -> List[str]:
        return sorted(
            t.texture_id for t in self.textures.values()
            if (split is None or t.split == split)
            and (sprites is None or t.is_sprite == sprites)
            and t.texture_id.startswith(prefix)
        )

    def sample(self, rng: np.random.Generator, split: str = "train", sprites: Optional[bool] = False,
               prefix: str = "") -> str:
        ids = self.ids(split, sprites, prefix)
        if not ids:
            raise ValueError(f"no occluder textures in split {split!r} (sprites={sprites}, prefix={prefix!r})")
        return ids[int(rng.integers(len(ids)))]

    def save(self, directory: str | Path) -> Path:
        """Write textures as PNG (alpha as a second PNG) plus an ``index.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = directory / "index.csv"
        with open(index, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["texture_id", "path", "alpha_path", "split"])
            for tid in sorted(self.textures):
                tex = self.textures[tid]
                write_image(directory / f"{tid}.png", tex.pixels)
                alpha_rel = ""
                if tex.alpha is not None:
                    alpha_rel = f"{tid}.alpha.png"
                    write_image(directory / alpha_rel, tex.alpha.astype(np.float32))
                writer.writerow([tid, f"{tid}.png", alpha_rel, tex.split])
        return index

    @classmethod
    def load(cls, index_path: str | Path) -> "OccluderCorpus":
        index_path = Path(index_path)
        textures = {}
        with open(index_path, newline="") as fh:
            for row in csv.DictReader(fh):
                pixels = read_image(index_path.parent / row["path"])[0]
                alpha = None
                if row.get("alpha_path"):
                    alpha = read_image(index_path.parent / row["alpha_path"])[0] > 0.5
                tid = row["texture_id"]
                textures[tid] = Texture(tid, pixels, alpha, row["split"])
        return cls(textures)


def apply_occluder(face: np.ndarray, occluder: OccluderSpec, corpus: OccluderCorpus):
    """Paste an occluder onto a copy of ``face``; returns (occluded_face, region)."""
    face = np.asarray(face, dtype=np.float32)
    height, width = face.shape[-2:]
    top, left, bottom, right = occluder.placement_rect
    if not (0 <= top < bottom <= height and 0 <= left < right <= width):
        raise ValueError(f"placement {occluder.placement_rect} empty or outside {height}x{width} image")
    texture = corpus.get(occluder.texture_id)
    pixels, alpha = texture.render(bottom - top, right - left)
    region = np.zeros((height, width), dtype=bool)
    region[top:bottom, left:right] = alpha
    out = face.copy()
    out[..., region] = pixels[alpha]
    return out, region


def occlude_block(face: np.ndarray, block: int, occluder: OccluderSpec, grid: GridSpec,
                  corpus: OccluderCorpus, min_fraction: float = 0.5):
    """Occlude ``block`` of the face; the placement must cover at least half the block."""
    if np.asarray(face).shape[-2:] != grid.shape:
        raise ValueError(f"face shape {np.asarray(face).shape} does not match grid {grid.shape}")
    occluded, region = apply_occluder(face, occluder, corpus)
    top, left, bottom, right = grid.block_rect(block)
    covered = region[top:bottom, left:right].mean()
    if covered < min_fraction:
        raise ValueError(f"occluder covers {covered:.2f} of block {block}, need >= {min_fraction}")
    return occluded, region


def block_occluder(block: int, grid: GridSpec, rng: np.random.Generator, corpus: OccluderCorpus,
                   split: str = "train", jitter: int = 2) -> OccluderSpec:
    """Opaque textured occluder over a block, each edge pushed outward by 0..jitter px."""
    top, left, bottom, right = grid.block_rect(block)
    grow = rng.integers(0, jitter + 1, size=4)
    rect = (
        max(0, top - int(grow[0])),
        max(0, left - int(grow[1])),
        min(grid.image_height, bottom + int(grow[2])),
        min(grid.image_width, right + int(grow[3])),
    )
    return OccluderSpec(corpus.sample(rng, split, sprites=False), rect)


def random_rect(grid: GridSpec, area_fraction: float, rng: np.random.Generator) -> Rect:
    """Random rectangle whose area is area_fraction * U(0.5, 1.5) of the image
    (so the expected fraction is area_fraction) with aspect ratio in [1/2, 2]."""
    if not 0.0 < area_fraction < 1.0:
        raise ValueError(f"area_fraction must lie in (0, 1), got {area_fraction}")
    height, width = grid.shape
    area = area_fraction * rng.uniform(0.5, 1.5) * height * width
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, height))
    w = int(np.clip(round(area / h), 1, width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, top + h, left + w


def random_occlude(face: np.ndarray, grid: GridSpec, area_fraction: float, rng: np.random.Generator,
                   corpus: Optional[OccluderCorpus] = None, split: str = "train"):
    """Occlude a random rectangle of expected area ``area_fraction`` of the image."""
    rect = random_rect(grid, area_fraction, rng)
    if corpus is None:
        kind = TEXTURE_KINDS[int(rng.integers(len(TEXTURE_KINDS)))]
        corpus = OccluderCorpus({"adhoc": Texture("adhoc", make_texture(kind, rng))})
        tid = "adhoc"
    else:
        tid = corpus.sample(rng, split, sprites=False)
    return apply_occluder(face, OccluderSpec(tid, rect), corpus)


def sprite_occlude(face: np.ndarray, grid: GridSpec, kind: str, rng: np.random.Generator,
                   corpus: OccluderCorpus, split: str = "test"):
    """Sunglasses over the eye row or a scarf over the lower face."""
    height, width = grid.shape
    r, c = grid.row_edges(), grid.col_edges()
    if kind == "sunglasses":
        rect = (int(r[2]) - int(rng.integers(0, 2)), int(c[1]) - int(rng.integers(0, 3)),
                int(r[3]) + int(rng.integers(0, 2)), int(c[4]) + int(rng.integers(0, 3)))
    elif kind == "scarf":
        rect = (int(r[3]) - int(rng.integers(0, 3)), int(c[0]) + int(rng.integers(0, 3)),
                height, width - int(rng.integers(0, 3)))
    else:
        raise ValueError(f"unknown sprite kind {kind!r}")
    rect = (max(rect[0], 0), max(rect[1], 0), min(rect[2], height), min(rect[3], width))
    tid = corpus.sample(rng, split, sprites=True, prefix=f"sprite-{kind}")
    return apply_occluder(face, OccluderSpec(tid, rect), corpus)


@dataclass
class TrainingPair:
    clean: np.ndarray
    occluded: np.ndarray
    identity: int
    target_block: int
    occluded_blocks: frozenset
    region: np.ndarray = field(repr=False)
    index: int = -1


def sample_pdsn_pair(dataset: FaceDataset, target_block: int, grid: GridSpec, rng: np.random.Generator,
                     corpus: OccluderCorpus, p_aug: float = 0.5, split: str = "train") -> TrainingPair:
    """A (clean, occluded) pair of one face, occluded on ``target_block`` and,
    with probability ``p_aug``, additionally on one of its 4-neighbours."""
    if len(dataset) == 0:
        raise RuntimeError("cannot sample pairs from an empty dataset")
    index = int(rng.integers(len(dataset)))
    clean = dataset.images[index]
    occluded, region = occlude_block(clean, target_block, block_occluder(target_block, grid, rng, corpus, split),
                                     grid, corpus)
    blocks = {int(target_block)}
    if rng.random() < p_aug:
        neighbours = grid.neighbors4(target_block)
        extra = neighbours[int(rng.integers(len(neighbours)))]
        occluded, extra_region = occlude_block(occluded, extra, block_occluder(extra, grid, rng, corpus, split),
                                               grid, corpus)
        region = region | extra_region
        blocks.add(int(extra))
    return TrainingPair(clean, occluded, int(dataset.labels[index]), int(target_block),
                        frozenset(blocks), region, index)
