"""Masked matching: FDM composition, both-sides masked embeddings, identification,
verification and the Stage-3 finetune.

The probe's mask is applied to every face it is compared with. Gallery top
conv features are cached so that only the head re-runs per probe mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import FaceDataset
from .dictionary import MaskDictionary, StateError
from .grid import GridSpec, region_to_blocks
from .occlusion import OccluderCorpus, random_occlude
from .trunk import FinetuneConfig, TrunkNet, as_tensor, extract_features, finetune_trunk, head_embeddings, normalize

VARIANTS = ("binary", "soft", "soft_binary")


def compose_fdm(dictionary: MaskDictionary, blocks: Iterable[int], feature_shape=None) -> np.ndarray:
    """Element-wise AND of the dictionary entries of the occluded blocks.

    Blocks without an entry (peripheral blocks) contribute all-ones.
    """
    if feature_shape is not None and tuple(feature_shape) != dictionary.feature_shape:
        raise StateError(f"dictionary shape {dictionary.feature_shape} != trunk feature shape {tuple(feature_shape)}")
    out = np.ones(dictionary.feature_shape, dtype=bool)
    for b in blocks:
        entry = dictionary.entries.get(int(b))
        if entry is not None:
            out &= entry
    return out


def apply_variant(dictionary: MaskDictionary, blocks: Iterable[int], variant: str = "binary") -> np.ndarray:
    """Mask volume for an occluded block set: ``binary`` (FDM), ``soft``
    (product of mean masks) or ``soft_binary`` (soft values, zero where the FDM is 0)."""
    blocks = list(blocks)
    if variant == "binary":
        return compose_fdm(dictionary, blocks)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if dictionary.mean_masks is None:
        raise StateError(f"variant {variant!r} needs the dictionary's mean masks")
    soft = np.ones(dictionary.feature_shape, dtype=np.float32)
    for b in blocks:
        m = dictionary.mean_masks.get(int(b))
        if m is not None:
            soft = soft * m
    if variant == "soft_binary":
        soft = soft * compose_fdm(dictionary, blocks)
    return soft


def _mask_tensor(mask, net: TrunkNet) -> torch.Tensor:
    mask = as_tensor(np.asarray(mask, dtype=np.float32), net.dtype)
    if tuple(mask.shape) != net.feature_shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} != trunk feature shape {net.feature_shape}")
    return mask


@torch.no_grad()
def masked_embed(trunk: TrunkNet, face, fdm) -> torch.Tensor:
    """forward_head(fdm * forward_conv(face)) for one face or a batch."""
    mask = _mask_tensor(fdm, trunk)
    feats = extract_features(trunk, face if np.ndim(face) == 4 else np.asarray(face)[None])
    emb = head_embeddings(trunk, feats * mask)
    return emb if np.ndim(face) == 4 else emb[0]


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return normalize(a) @ normalize(b).T


@dataclass
class ProbeContext:
    face: np.ndarray
    occlusion: np.ndarray
    occluded_blocks: FrozenSet[int]
    fdm: np.ndarray
    probe_id: str = ""


def make_probe(face, occlusion, grid: GridSpec, dictionary: MaskDictionary,
               iou_threshold: float = 0.5, probe_id: str = "") -> ProbeContext:
    blocks = region_to_blocks(occlusion, grid, iou_threshold)
    return ProbeContext(np.asarray(face), np.asarray(occlusion, dtype=bool), blocks,
                        compose_fdm(dictionary, blocks), probe_id)


@dataclass
class MatchResult:
    score: float
    probe_id: str = ""
    gallery_id: str = ""


def match(trunk: TrunkNet, dictionary: MaskDictionary, probe: ProbeContext, gallery_face,
          gallery_id: str = "") -> MatchResult:
    compose_fdm(dictionary, (), trunk.feature_shape)
    emb = masked_embed(trunk, np.stack([probe.face, np.asarray(gallery_face)]), probe.fdm)
    return MatchResult(float(cosine(emb[:1], emb[1:])[0, 0]), probe.probe_id, gallery_id)


@dataclass
class ProbeSet:
    """Probe faces with identity labels and their occluded block sets."""

    images: np.ndarray
    labels: np.ndarray
    blocks: List[FrozenSet[int]]
    kind: str = "probe"

    def __len__(self):
        return len(self.labels)

    @classmethod
    def clean(cls, dataset: FaceDataset) -> "ProbeSet":
        return cls(dataset.images, dataset.labels, [frozenset()] * len(dataset), "clean")


@dataclass
class IdentificationResult:
    accuracy: float
    predictions: np.ndarray  # gallery label of the nearest gallery face
    rankings: np.ndarray  # (probes, gallery) gallery indices, best first
    scores: np.ndarray  # (probes, gallery) cosine similarities
    labels: np.ndarray = field(repr=False, default=None)


class GalleryCache:
    """Top conv features of a gallery, re-headed per probe mask."""

    def __init__(self, trunk: TrunkNet, gallery: FaceDataset):
        if len(gallery) == 0:
            raise ValueError("empty gallery")
        self.trunk = trunk
        self.labels = gallery.labels
        self.features = extract_features(trunk, gallery.images)
        self._cache: Dict[bytes, torch.Tensor] = {}

    def embeddings(self, mask: Optional[np.ndarray] = None) -> torch.Tensor:
        if mask is None:
            return head_embeddings(self.trunk, self.features)
        key = np.asarray(mask).tobytes()
        if key not in self._cache:
            self._cache[key] = head_embeddings(self.trunk, self.features * _mask_tensor(mask, self.trunk))
        return self._cache[key]


def _rank(scores: np.ndarray, labels: np.ndarray, gallery_labels: np.ndarray) -> IdentificationResult:
    rankings = np.argsort(-scores, axis=1, kind="stable")
    predictions = gallery_labels[rankings[:, 0]] if scores.shape[1] else np.empty(0, dtype=np.int64)
    acc = float((predictions == labels).mean()) if len(labels) else float("nan")
    return IdentificationResult(acc, predictions, rankings, scores, labels)


def identify(trunk: TrunkNet, dictionary: Optional[MaskDictionary], probes: ProbeSet, gallery: FaceDataset,
             variant: str = "binary", cache: Optional[GalleryCache] = None) -> IdentificationResult:
    """Rank-1 nearest-neighbour identification with both-sides masking.

    Probes sharing an occluded block set are scored together; with
    ``dictionary=None`` no masking is done at all.
    """
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    if dictionary is not None:
        compose_fdm(dictionary, (), trunk.feature_shape)
    cache = cache or GalleryCache(trunk, gallery)
    feats = extract_features(trunk, probes.images)
    scores = np.empty((len(probes), len(gallery)), dtype=np.float64)
    groups: Dict[FrozenSet[int], List[int]] = {}
    for i, b in enumerate(probes.blocks):
        groups.setdefault(frozenset(b) if dictionary is not None else frozenset(), []).append(i)
    for blocks, idx in groups.items():
        if dictionary is None:
            probe_emb, gal_emb = head_embeddings(trunk, feats[idx]), cache.embeddings()
        else:
            mask = apply_variant(dictionary, sorted(blocks), variant)
            probe_emb = head_embeddings(trunk, feats[idx] * _mask_tensor(mask, trunk))
            gal_emb = cache.embeddings(mask)
        scores[idx] = cosine(probe_emb, gal_emb).numpy()
    return _rank(scores, probes.labels, gallery.labels)


def identify_plain(trunk: TrunkNet, probe_images, probe_labels, gallery: FaceDataset) -> IdentificationResult:
    """Unmasked reference pipeline: embed everything, nearest neighbour by cosine."""
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    probe_emb = head_embeddings(trunk, extract_features(trunk, probe_images))
    gal_emb = head_embeddings(trunk, extract_features(trunk, gallery.images))
    return _rank(cosine(probe_emb, gal_emb).numpy(), np.asarray(probe_labels), gallery.labels)


@dataclass
class VerificationPairs:
    first: np.ndarray
    second: np.ndarray
    same: np.ndarray
    blocks_first: List[FrozenSet[int]]
    blocks_second: List[FrozenSet[int]]

    def __len__(self):
        return len(self.same)


def make_pairs(dataset: FaceDataset, n: int, rng: np.random.Generator,
               blocks: Optional[Sequence[FrozenSet[int]]] = None) -> VerificationPairs:
    """``n`` pairs, half same-identity and half different, drawn from ``dataset``.

    ``blocks[i]`` is the occluded block set of ``dataset.images[i]`` (empty when None).
    """
    counts = np.bincount(dataset.labels)
    if not (counts >= 2).any() or (counts > 0).sum() < 2:
        raise ValueError("need an identity with two images and at least two identities")
    first, second, same = [], [], []
    while len(same) < n:
        i = int(rng.integers(len(dataset)))
        want_same = len(same) % 2 == 0
        mask = dataset.labels == dataset.labels[i] if want_same else dataset.labels != dataset.labels[i]
        pool = np.flatnonzero(mask)
        pool = pool[pool != i]
        if len(pool) == 0:
            continue
        first.append(i)
        second.append(int(rng.choice(pool)))
        same.append(want_same)
    first, second = np.array(first), np.array(second)
    none = [frozenset()] * len(dataset)
    blocks = list(blocks) if blocks is not None else none
    return VerificationPairs(dataset.images[first], dataset.images[second], np.array(same),
                             [blocks[i] for i in first], [blocks[i] for i in second])


def best_threshold_accuracy(scores: np.ndarray, same: np.ndarray) -> Tuple[float, float]:
    """(threshold, accuracy) maximizing accuracy over the observed scores."""
    candidates = np.concatenate([np.unique(scores), [np.inf]])
    accs = [threshold_metrics(scores, same, t)[2] for t in candidates]
    k = int(np.argmax(accs))
    return float(candidates[k]), float(accs[k])


@dataclass
class VerificationResult:
    scores: np.ndarray
    threshold: float
    accuracy: float
    roc: List[tuple] = field(default_factory=list)  # (threshold, tpr, fpr, accuracy)

    @property
    def best_accuracy(self) -> float:
        return max((row[3] for row in self.roc), default=self.accuracy)


def verification_scores(trunk: TrunkNet, dictionary: Optional[MaskDictionary], pairs: VerificationPairs,
                        variant: str = "binary") -> np.ndarray:
    """Cosine score per pair; the union of both faces' occluded blocks masks both sides."""
    f1 = extract_features(trunk, pairs.first)
    f2 = extract_features(trunk, pairs.second)
    scores = np.empty(len(pairs), dtype=np.float64)
    groups: Dict[FrozenSet[int], List[int]] = {}
    for i, (a, b) in enumerate(zip(pairs.blocks_first, pairs.blocks_second)):
        groups.setdefault(frozenset(a) | frozenset(b) if dictionary is not None else frozenset(), []).append(i)
    for blocks, idx in groups.items():
        if dictionary is None:
            e1, e2 = head_embeddings(trunk, f1[idx]), head_embeddings(trunk, f2[idx])
        else:
            mask = _mask_tensor(apply_variant(dictionary, sorted(blocks), variant), trunk)
            e1, e2 = head_embeddings(trunk, f1[idx] * mask), head_embeddings(trunk, f2[idx] * mask)
        scores[idx] = (normalize(e1) * normalize(e2)).sum(dim=1).numpy()
    return scores


def threshold_metrics(scores: np.ndarray, same: np.ndarray, threshold: float):
    accept = scores >= threshold
    same = np.asarray(same, dtype=bool)
    tpr = float(accept[same].mean()) if same.any() else float("nan")
    fpr = float(accept[~same].mean()) if (~same).any() else float("nan")
    return tpr, fpr, float((accept == same).mean())


def verify(trunk: TrunkNet, dictionary: Optional[MaskDictionary], pairs: VerificationPairs, threshold: float,
           sweep: Optional[Sequence[float]] = None, variant: str = "binary") -> VerificationResult:
    """Accept a pair when its score >= threshold. ``sweep`` adds ROC rows."""
    scores = verification_scores(trunk, dictionary, pairs, variant)
    acc = threshold_metrics(scores, pairs.same, threshold)[2]
    roc = [(float(t), *threshold_metrics(scores, pairs.same, t)) for t in (sweep or ())]
    return VerificationResult(scores, float(threshold), acc, roc)


def default_sweep(n: int = 401) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n)


def finetune_stage3(trunk: TrunkNet, dictionary: MaskDictionary, dataset: FaceDataset, config: FinetuneConfig,
                    grid: GridSpec, corpus: OccluderCorpus, iou_threshold: float = 0.5) -> TrunkNet:
    """Finetune trunk and head on randomly occluded faces multiplied by their composed FDMs.

    The dictionary is not rebuilt.
    """
    compose_fdm(dictionary, (), trunk.feature_shape)
    fdm_cache: Dict[FrozenSet[int], torch.Tensor] = {}

    def mask_fn(region):
        blocks = region_to_blocks(region, grid, iou_threshold)
        if blocks not in fdm_cache:
            fdm_cache[blocks] = _mask_tensor(compose_fdm(dictionary, blocks), trunk)
        return fdm_cache[blocks]

    def occlude(face, rng):
        return random_occlude(face, grid, config.area_fraction, rng, corpus, "train")

    return finetune_trunk(trunk, dataset, config, occlude, mask_fn, tag="stage3")


def finetune_baseline(trunk: TrunkNet, dataset: FaceDataset, config: FinetuneConfig, grid: GridSpec,
                      corpus: OccluderCorpus) -> TrunkNet:
    """Occlusion-augmented finetune without masks (the 'Baseline' model)."""

    def occlude(face, rng):
        return random_occlude(face, grid, config.area_fraction, rng, corpus, "train")

    return finetune_trunk(trunk, dataset, config, occlude, None, tag="baseline")
