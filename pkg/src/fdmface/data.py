"""Identity-labelled aligned faces: in-memory dataset, manifests, synthetic faces."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


@dataclass
class FaceDataset:
    """Aligned faces stored as float32 (N, C, H, W) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, index: Sequence[int]) -> "FaceDataset":
        index = np.asarray(index, dtype=np.int64)
        return FaceDataset(self.images[index], self.labels[index])

    def split_per_identity(self, counts: Sequence[int], rng: np.random.Generator | None = None):
        """Split every identity's images into consecutive chunks of the given sizes.

        Images keep their original order within an identity unless ``rng`` is
        given, in which case they are shuffled first.
        """
        parts = [[] for _ in counts]
        for ident in self.identities:
            idx = np.flatnonzero(self.labels == ident)
            if rng is not None:
                idx = rng.permutation(idx)
            if len(idx) < sum(counts):
                raise ValueError(f"identity {ident} has {len(idx)} images, need {sum(counts)}")
            start = 0
            for part, count in zip(parts, counts):
                part.extend(idx[start:start + count])
                start += count
        return tuple(self.subset(p) for p in parts)


def load_manifest(path: str | Path) -> FaceDataset:
    """Read a CSV manifest with ``path,identity`` rows; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    images, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(read_image(path.parent / row["path"]))
            labels.append(int(row["identity"]))
    if not images:
        raise ValueError(f"manifest {path} lists no images")
    return FaceDataset(np.stack(images), np.asarray(labels))


def save_manifest(dataset: FaceDataset, directory: str | Path, name: str = "manifest.csv") -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / name
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "identity"])
        for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
            rel = f"images/{int(label):04d}_{i:06d}.png"
            write_image(directory / rel, img)
            writer.writerow([rel, int(label)])
    return manifest


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.shape[-1] in (3, 4) and arr.shape[0] not in (1, 3):
        arr = np.moveaxis(arr[..., :3], -1, 0)
    return arr


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


# --- synthetic faces ------------------------------------------------------


@dataclass
class _Identity:
    skin: float
    texture: np.ndarray
    eye_y: float
    eye_dx: float
    eye_r: float
    eye_dark: float
    brow_tilt: float
    brow_thick: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    mouth_dark: float


def _make_identity(rng: np.random.Generator, height: int, width: int, texture_amp: float) -> _Identity:
    tex = gaussian_filter(rng.standard_normal((height, width)), sigma=1.5)
    tex = tex / (tex.std() + 1e-8) * texture_amp
    return _Identity(
        skin=rng.uniform(0.40, 0.70),
        texture=tex.astype(np.float32),
        eye_y=rng.uniform(0.42, 0.48),
        eye_dx=rng.uniform(0.17, 0.24),
        eye_r=rng.uniform(0.05, 0.08),
        eye_dark=rng.uniform(0.25, 0.45),
        brow_tilt=rng.uniform(-0.3, 0.3),
        brow_thick=rng.uniform(0.015, 0.035),
        nose_len=rng.uniform(0.10, 0.18),
        nose_w=rng.uniform(0.03, 0.07),
        mouth_y=rng.uniform(0.74, 0.80),
        mouth_w=rng.uniform(0.10, 0.20),
        mouth_dark=rng.uniform(0.2, 0.4),
    )


def _render(ident: _Identity, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    y, x = np.mgrid[0:height, 0:width].astype(np.float32)
    dy, dx = rng.uniform(-1.0, 1.0, size=2)
    v = (y - dy) / height
    u = (x - dx) / width

    img = np.full((height, width), 0.15, dtype=np.float32)
    oval = ((u - 0.5) / 0.42) ** 2 + ((v - 0.52) / 0.50) ** 2 <= 1.0
    tex = np.roll(ident.texture, (int(round(dy)), int(round(dx))), axis=(0, 1))
    img = np.where(oval, ident.skin + tex, img)

    for side in (-1.0, 1.0):
        cx = 0.5 + side * ident.eye_dx
        eye = ((u - cx) / (1.4 * ident.eye_r)) ** 2 + ((v - ident.eye_y) / ident.eye_r) ** 2 <= 1.0
        img = np.where(eye, img - ident.eye_dark, img)
        brow_y = ident.eye_y - 0.09 + side * ident.brow_tilt * (u - cx)
        brow = (np.abs(v - brow_y) < ident.brow_thick) & (np.abs(u - cx) < 0.11)
        img = np.where(brow, img - 0.3, img)

    nose = (np.abs(u - 0.5) < ident.nose_w) & (v > ident.eye_y + 0.05) & (v < ident.eye_y + 0.05 + ident.nose_len)
    img = np.where(nose, img + 0.12, img)
    mouth_w = ident.mouth_w * rng.uniform(0.85, 1.15)
    mouth = ((u - 0.5) / mouth_w) ** 2 + ((v - ident.mouth_y) / 0.035) ** 2 <= 1.0
    img = np.where(mouth, img - ident.mouth_dark, img)

    contrast = rng.uniform(0.85, 1.15)
    img = (img - 0.5) * contrast + 0.5 + rng.uniform(-0.08, 0.08)
    img = img + rng.uniform(-0.08, 0.08) * (u - 0.5) * 2.0
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_faces(
    n_identities: int = 60,
    per_identity: int = 24,
    image_size: tuple = (40, 40),
    seed: int = 0,
    texture_amp: float = 0.12,
) -> FaceDataset:
    """Procedural grayscale 'faces': a shared layout with identity-specific
    facial parts and skin texture, plus per-image pose/illumination/noise."""
    if n_identities < 1 or per_identity < 1:
        raise ValueError("need at least one identity and one image per identity")
    rng = np.random.default_rng(seed)
    height, width = image_size
    images = np.empty((n_identities * per_identity, 1, height, width), dtype=np.float32)
    labels = np.repeat(np.arange(n_identities), per_identity)
    for ident_idx in range(n_identities):
        ident = _make_identity(rng, height, width, texture_amp)
        for k in range(per_identity):
            images[ident_idx * per_identity + k, 0] = _render(ident, height, width, rng)
    return FaceDataset(images, labels)
