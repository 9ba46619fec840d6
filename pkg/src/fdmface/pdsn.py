"""Pairwise differential siamese training of per-block mask generators.

A generator maps the absolute difference between the top conv features of
an occluded face and its clean counterpart to a soft mask in (0, 1) of the
same shape. It is trained against a frozen trunk with

    total = cls + lam * diff
    cls   = -log p_y(F(mask * f(x_occ)))
    diff  = || mask * f(x_clean) - mask * f(x_occ) ||_1   (sum over elements)

both averaged over the pairs of a batch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint
from .data import FaceDataset
from .grid import GridSpec
from .occlusion import OccluderCorpus, sample_pdsn_pair
from .trunk import TrainingDiverged, TrunkNet, extract_features, trunk_id

logger = logging.getLogger(__name__)


@dataclass
class MaskGeneratorConfig:
    channels: int = 32
    depth: int = 2
    kernel: int = 3
    lam: float = 10.0
    differential: bool = True  # False: input is f(x_occ) itself and lam is forced to 0
    lr: float = 0.01
    weight_decay: float = 0.0
    steps: int = 300
    batch_size: int = 64
    p_aug: float = 0.5
    target_block: int = 13
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.differential else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class MaskGenerator(nn.Module):
    """``depth`` CONV-PReLU-BN blocks followed by a sigmoid."""

    def __init__(self, config: MaskGeneratorConfig):
        super().__init__()
        self.config = config
        c, k = config.channels, config.kernel
        layers = []
        for _ in range(config.depth):
            layers += [nn.Conv2d(c, c, k, padding=k // 2), nn.PReLU(c), nn.BatchNorm2d(c)]
        self.body = nn.Sequential(*layers)
        self.trunk_id: Optional[str] = None
        self.meta: dict = {}

    @property
    def target_block(self) -> int:
        return self.config.target_block

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.channels:
            raise ValueError(f"generator expects (N, {self.config.channels}, H, W), got {tuple(x.shape)}")
        return torch.sigmoid(self.body(x))


def diff_input(clean_feature, occ_feature) -> torch.Tensor:
    clean_feature = torch.as_tensor(clean_feature)
    occ_feature = torch.as_tensor(occ_feature)
    if clean_feature.shape != occ_feature.shape:
        raise ValueError(f"feature shapes differ: {tuple(clean_feature.shape)} vs {tuple(occ_feature.shape)}")
    return (occ_feature - clean_feature).abs()


def generator_input(generator: MaskGenerator, clean_feature, occ_feature) -> torch.Tensor:
    if generator.config.differential:
        return diff_input(clean_feature, occ_feature)
    return torch.as_tensor(occ_feature)


def generate_mask(generator: MaskGenerator, diff) -> torch.Tensor:
    """Soft mask for a (batch of) generator input(s) in inference mode."""
    diff = torch.as_tensor(diff, dtype=next(generator.parameters()).dtype)
    single = diff.ndim == 3
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        out = generator(diff[None] if single else diff)
    generator.train(was_training)
    return out[0] if single else out


def pdsn_loss_from_features(generator: MaskGenerator, trunk: TrunkNet, clean_feature: torch.Tensor,
                            occ_feature: torch.Tensor, labels: torch.Tensor,
                            lam: Optional[float] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Loss on precomputed top conv features of a batch of pairs."""
    if lam is None:
        lam = generator.config.effective_lam
    mask = generator(generator_input(generator, clean_feature, occ_feature))
    masked_occ = mask * occ_feature
    cls = trunk.classification_loss(trunk.forward_head(masked_occ), labels).mean()
    diff = (mask * clean_feature - masked_occ).abs().flatten(1).sum(dim=1).mean()
    total = cls + lam * diff
    return total, {"cls": cls, "diff": diff, "mask": mask}


def pdsn_loss(generator: MaskGenerator, trunk: TrunkNet, clean, occluded, labels,
              lam: Optional[float] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Total loss and its components for a batch of (clean, occluded) face pairs."""
    with torch.no_grad():
        f_clean = trunk.forward_conv(clean)
        f_occ = trunk.forward_conv(occluded)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    total, parts = pdsn_loss_from_features(generator, trunk, f_clean, f_occ, labels, lam)
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite PDSN loss (cls={parts['cls'].item()}, diff={parts['diff'].item()})")
    return total, parts


def freeze(net: TrunkNet) -> TrunkNet:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def sample_batch(dataset: FaceDataset, block: int, grid: GridSpec, rng: np.random.Generator,
                 corpus: OccluderCorpus, batch_size: int, p_aug: float, split: str = "train"):
    pairs = [sample_pdsn_pair(dataset, block, grid, rng, corpus, p_aug, split) for _ in range(batch_size)]
    index = np.array([p.index for p in pairs])
    occluded = np.stack([p.occluded for p in pairs])
    return index, occluded, pairs


def train_mask_generator(trunk: TrunkNet, dataset: FaceDataset, config: MaskGeneratorConfig,
                         grid: GridSpec, corpus: OccluderCorpus,
                         heldout: Optional[FaceDataset] = None, eval_every: int = 50) -> MaskGenerator:
    """Stage 2: fit one generator for ``config.target_block`` against the frozen trunk.

    Per-step loss components are kept in ``generator.meta['history']``; when
    ``heldout`` is given, the mean diff loss on a fixed held-out pair set is
    logged every ``eval_every`` steps.
    """
    if not grid.is_central(config.target_block):
        raise ValueError(f"block {config.target_block} is not a central block; peripheral blocks have no generator")
    if config.channels != trunk.feature_shape[0]:
        raise ValueError(f"generator channels {config.channels} != trunk channels {trunk.feature_shape[0]}")
    requires_grad = [p.requires_grad for p in trunk.parameters()]
    was_training = trunk.training
    before = trunk_id(trunk)
    freeze(trunk)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    generator = MaskGenerator(config).to(trunk.dtype)
    opt = torch.optim.Adam(generator.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    clean_feats = extract_features(trunk, dataset.images)
    labels_all = torch.from_numpy(dataset.labels)

    heldout_set = None
    if heldout is not None:
        eval_rng = np.random.default_rng(config.seed + 10_000)
        index, occluded, _ = sample_batch(heldout, config.target_block, grid, eval_rng, corpus,
                                          config.batch_size, config.p_aug)
        heldout_set = (extract_features(trunk, heldout.images[index]), extract_features(trunk, occluded),
                       torch.from_numpy(heldout.labels[index]))

    history = {"step": [], "cls": [], "diff": [], "total": [], "ratio": [], "heldout_step": [], "heldout_diff": []}
    lam = config.effective_lam

    def log_heldout(step):
        if heldout_set is None:
            return
        generator.eval()
        with torch.no_grad():
            _, parts = pdsn_loss_from_features(generator, trunk, *heldout_set, lam=lam)
        generator.train()
        history["heldout_step"].append(step)
        history["heldout_diff"].append(parts["diff"].item())

    log_heldout(0)
    for step in range(1, config.steps + 1):
        generator.train()
        index, occluded, _ = sample_batch(dataset, config.target_block, grid, rng, corpus,
                                          config.batch_size, config.p_aug)
        with torch.no_grad():
            f_occ = trunk.forward_conv(occluded)
        total, parts = pdsn_loss_from_features(generator, trunk, clean_feats[index], f_occ,
                                               labels_all[index], lam=lam)
        if not torch.isfinite(total):
            raise TrainingDiverged(f"PDSN loss non-finite at step {step} for block {config.target_block}")
        opt.zero_grad()
        total.backward()
        opt.step()
        cls, diff = parts["cls"].item(), parts["diff"].item()
        history["step"].append(step)
        history["cls"].append(cls)
        history["diff"].append(diff)
        history["total"].append(total.item())
        history["ratio"].append(cls / (lam * diff) if lam * diff > 0 else float("inf"))
        if step % eval_every == 0:
            log_heldout(step)

    for p, flag in zip(trunk.parameters(), requires_grad):
        p.requires_grad_(flag)
    trunk.train(was_training)
    after = trunk_id(trunk)
    if after != before:
        raise RuntimeError("trunk changed during mask generator training")

    generator.eval()
    generator.trunk_id = before
    generator.meta = {"history": history}
    logger.info("block %d: cls %.3f diff %.3f", config.target_block,
                float(np.mean(history["cls"][-20:])), float(np.mean(history["diff"][-20:])))
    return generator


def generator_checkpoint(generator: MaskGenerator, with_history: bool = False) -> Checkpoint:
    meta = {"target_block": generator.target_block, "trunk_id": generator.trunk_id}
    if with_history:
        meta["history"] = generator.meta.get("history")
    return Checkpoint("mask_generator", generator.config.to_dict(), meta, generator.state_dict())


def save_generator(generator: MaskGenerator, path: str | Path) -> str:
    return generator_checkpoint(generator).save(path)


def load_generator(path: str | Path) -> MaskGenerator:
    ckpt = Checkpoint.load(path)
    if ckpt.kind != "mask_generator":
        raise ValueError(f"expected a mask_generator checkpoint, got {ckpt.kind!r}")
    generator = MaskGenerator(MaskGeneratorConfig(**ckpt.config))
    if next(iter(ckpt.state.values())).dtype == torch.float64:
        generator.double()
    generator.load_state_dict(ckpt.state)
    generator.eval()
    generator.trunk_id = ckpt.meta.get("trunk_id")
    generator.meta = {k: v for k, v in ckpt.meta.items() if k not in ("trunk_id", "target_block")}
    return generator
