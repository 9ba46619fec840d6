"""Mean masks, top-tau binarization and the per-block FDM dictionary.

Feature volumes are (C, H, W); flattening is channel-major (C order), which
also fixes the tie-break of :func:`binarize`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .data import FaceDataset
from .grid import GridSpec
from .occlusion import OccluderCorpus
from .pdsn import MaskGenerator, generate_mask, generator_input, sample_batch
from .trunk import TrunkNet, extract_features, trunk_id

MAGIC = b"FDMDICT\x00"
VERSION = 1
_HEADER = struct.Struct("<HIIId")  # version, C, Wf, Hf, tau


class StateError(RuntimeError):
    """Artifacts that do not fit together (shapes, trunk ids, missing payloads)."""


def minmax_normalize(mask) -> np.ndarray:
    """Affine map of a mask onto [0, 1]; a constant mask maps to all 0.5."""
    mask = np.asarray(mask, dtype=np.float64)
    lo, hi = mask.min(), mask.max()
    if hi == lo:
        return np.full_like(mask, 0.5)
    return (mask - lo) / (hi - lo)


class StreamingMean:
    """Running elementwise mean; ``merge`` combines partial means."""

    def __init__(self):
        self.count = 0
        self.mean: Optional[np.ndarray] = None

    def add(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self.mean is None:
            self.mean = np.zeros_like(x)
        elif x.shape != self.mean.shape:
            raise ValueError(f"mask shape {x.shape} != {self.mean.shape}")
        self.count += 1
        self.mean += (x - self.mean) / self.count

    def merge(self, other: "StreamingMean") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean = other.count, other.mean.copy()
            return
        total = self.count + other.count
        self.mean += (other.mean - self.mean) * (other.count / total)
        self.count = total


@dataclass
class MeanMask:
    values: np.ndarray
    pair_count: int


def mean_mask(masks: Iterable) -> MeanMask:
    acc = StreamingMean()
    for m in masks:
        acc.add(m)
    if acc.count == 0:
        raise ValueError("mean_mask needs at least one mask")
    return MeanMask(acc.mean, acc.count)


def zero_count(tau: float, k: int) -> int:
    """floor(tau * K), robust to decimal representation error in tau."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    return int(math.floor(round(tau * k, 9)))


def binarize(mean, tau: float) -> np.ndarray:
    """FDM with zeros at the floor(tau*K) smallest mean values (ties: lowest flat index)."""
    values = np.asarray(mean.values if isinstance(mean, MeanMask) else mean)
    flat = values.ravel()
    z = zero_count(tau, flat.size)
    bits = np.ones(flat.size, dtype=bool)
    bits[np.argsort(flat, kind="stable")[:z]] = False
    return bits.reshape(values.shape)


def collect_masks(generator: MaskGenerator, trunk: TrunkNet, dataset: FaceDataset, P: int,
                  grid: GridSpec, corpus: OccluderCorpus, rng: np.random.Generator,
                  batch_size: int = 128, p_aug: float = 0.0, split: str = "train") -> Iterator[np.ndarray]:
    """Yield P soft masks, each from a fresh pair occluded on the generator's block."""
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}")
    if generator.trunk_id is not None and generator.trunk_id != trunk_id(trunk):
        raise StateError("generator was trained against a different trunk")
    remaining = P
    while remaining:
        n = min(batch_size, remaining)
        index, occluded, _ = sample_batch(dataset, generator.target_block, grid, rng, corpus, n, p_aug, split)
        f_clean = extract_features(trunk, dataset.images[index])
        f_occ = extract_features(trunk, occluded)
        masks = generate_mask(generator, generator_input(generator, f_clean, f_occ)).numpy()
        yield from masks
        remaining -= n


@dataclass
class MaskDictionary:
    entries: Dict[int, np.ndarray]
    tau: float
    feature_shape: tuple
    trunk_id: str
    mean_masks: Optional[Dict[int, np.ndarray]] = None
    pair_counts: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.feature_shape = tuple(int(s) for s in self.feature_shape)
        self.entries = {int(b): np.asarray(m, dtype=bool) for b, m in sorted(self.entries.items())}
        for b, m in self.entries.items():
            if m.shape != self.feature_shape:
                raise StateError(f"entry {b} has shape {m.shape}, expected {self.feature_shape}")
        if self.mean_masks is not None:
            self.mean_masks = {int(b): np.asarray(m, dtype=np.float32) for b, m in sorted(self.mean_masks.items())}
            if set(self.mean_masks) != set(self.entries):
                raise StateError("mean masks must cover exactly the dictionary blocks")

    @property
    def blocks(self) -> tuple:
        return tuple(self.entries)

    @property
    def K(self) -> int:
        return int(np.prod(self.feature_shape))

    def with_tau(self, tau: float) -> "MaskDictionary":
        """Rebinarize the stored mean masks at another tau."""
        if self.mean_masks is None:
            raise StateError("dictionary holds no mean masks")
        return MaskDictionary({b: binarize(m, tau) for b, m in self.mean_masks.items()}, tau,
                              self.feature_shape, self.trunk_id, self.mean_masks, dict(self.pair_counts))

    def to_bytes(self) -> bytes:
        c, h, w = self.feature_shape
        tid = self.trunk_id.encode()
        out = [MAGIC, _HEADER.pack(VERSION, c, w, h, float(self.tau)), struct.pack("<H", len(tid)), tid,
               struct.pack("<H", len(self.entries)), struct.pack(f"<{len(self.entries)}H", *self.entries),
               struct.pack("<B", self.mean_masks is not None)]
        for m in self.entries.values():
            out.append(np.packbits(m.ravel()).tobytes())
        if self.mean_masks is not None:
            for b in self.entries:
                out.append(self.mean_masks[b].astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MaskDictionary":
        if data[:8] != MAGIC:
            raise ValueError("not a mask dictionary file (bad magic)")
        pos = 8
        version, c, w, h, tau = _HEADER.unpack_from(data, pos)
        if version != VERSION:
            raise ValueError(f"unsupported dictionary version {version}")
        pos += _HEADER.size
        (n,) = struct.unpack_from("<H", data, pos)
        tid = data[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        (nb,) = struct.unpack_from("<H", data, pos)
        blocks = struct.unpack_from(f"<{nb}H", data, pos + 2)
        pos += 2 + 2 * nb
        has_mean = bool(data[pos])
        pos += 1
        k = c * h * w
        nbytes = (k + 7) // 8
        entries = {}
        for b in blocks:
            bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos), count=k)
            entries[b] = bits.astype(bool).reshape(c, h, w)
            pos += nbytes
        means = None
        if has_mean:
            means = {}
            for b in blocks:
                means[b] = np.frombuffer(data, "<f4", k, pos).astype(np.float32).reshape(c, h, w)
                pos += 4 * k
        if pos != len(data):
            raise ValueError("trailing bytes in mask dictionary file")
        return cls(entries, tau, (c, h, w), tid, means)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "MaskDictionary":
        return cls.from_bytes(Path(path).read_bytes())


def build_dictionary(generators: Mapping[int, MaskGenerator] | Sequence[MaskGenerator], trunk: TrunkNet,
                     dataset: FaceDataset, tau: float, P: int, grid: GridSpec, corpus: OccluderCorpus,
                     seed: int = 0, batch_size: int = 128) -> MaskDictionary:
    """Stage II: per central block, mean of min-max normalized masks, binarized at tau."""
    if not isinstance(generators, Mapping):
        generators = {g.target_block: g for g in generators}
    expected = set(grid.central_blocks())
    if set(generators) != expected:
        raise StateError(f"need generators for central blocks {sorted(expected)}, got {sorted(generators)}")
    tid = trunk_id(trunk)
    for b, g in generators.items():
        if g.trunk_id != tid:
            raise StateError(f"generator for block {b} belongs to trunk {g.trunk_id}, not {tid}")
    entries, means, counts = {}, {}, {}
    for b in sorted(generators):
        rng = np.random.default_rng([seed, b])
        stream = collect_masks(generators[b], trunk, dataset, P, grid, corpus, rng, batch_size)
        m = mean_mask(minmax_normalize(x) for x in stream)
        means[b] = m.values.astype(np.float32)
        counts[b] = m.pair_count
        entries[b] = binarize(means[b], tau)
    return MaskDictionary(entries, tau, trunk.feature_shape, tid, means, counts)
