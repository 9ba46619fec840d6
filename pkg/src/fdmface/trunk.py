"""Trunk CNN: top-conv feature extractor, embedding head and cosine-margin classifier."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .data import FaceDataset

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrunkConfig:
    input_shape: Tuple[int, int, int] = (1, 40, 40)
    widths: Tuple[int, ...] = (16, 32, 32, 32)
    kernels: Tuple[int, ...] = (3, 3, 3, 1)
    pools: Tuple[bool, ...] = (True, True, True, False)
    embedding_dim: int = 64
    num_classes: int = 10
    head: str = "avgpool"  # or "flatten"
    scale: float = 30.0
    margin: float = 0.35
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: Tuple[float, ...] = (0.6, 0.85)  # fractions of total epochs, lr x0.1 at each
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.widths = tuple(self.widths)
        self.kernels = tuple(self.kernels)
        self.pools = tuple(bool(p) for p in self.pools)
        self.lr_milestones = tuple(self.lr_milestones)
        if not len(self.widths) == len(self.kernels) == len(self.pools):
            raise ValueError("widths, kernels and pools must have equal length")
        if self.head not in ("avgpool", "flatten"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.scale <= 0 or not 0 <= self.margin < 1:
            raise ValueError("need scale > 0 and margin in [0, 1)")
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError("conv kernels must be odd")

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        """(C, H, W) of the top conv feature."""
        _, h, w = self.input_shape
        n_pool = sum(self.pools)
        return self.widths[-1], h >> n_pool, w >> n_pool

    def to_dict(self) -> dict:
        return asdict(self)


class TrunkNet(nn.Module):
    """Small CNN: conv stages f (conv-BN-ReLU, optional 2x2 max-pool) and head F."""

    def __init__(self, config: TrunkConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = config.input_shape[0]
        for width, k, pool in zip(config.widths, config.kernels, config.pools):
            layers += [nn.Conv2d(in_ch, width, k, padding=k // 2, bias=False), nn.BatchNorm2d(width), nn.ReLU()]
            if pool:
                layers.append(nn.MaxPool2d(2))
            in_ch = width
        self.features = nn.Sequential(*layers)
        c, h, w = config.feature_shape
        fc_in = c if config.head == "avgpool" else c * h * w
        self.fc = nn.Linear(fc_in, config.embedding_dim)
        self.weight = nn.Parameter(torch.empty(config.num_classes, config.embedding_dim))
        nn.init.normal_(self.weight, std=0.01)
        self.trained = False
        self.meta: dict = {}

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        return self.config.feature_shape

    @property
    def dtype(self) -> torch.dtype:
        return self.fc.weight.dtype

    def geometry(self):
        """(kernel, stride, padding) of every spatial layer, input to output."""
        out = []
        for layer in self.features:
            if isinstance(layer, nn.Conv2d):
                out.append((layer.kernel_size[0], layer.stride[0], layer.padding[0]))
            elif isinstance(layer, nn.MaxPool2d):
                out.append((layer.kernel_size, layer.stride, layer.padding))
        return out

    def forward_conv(self, x) -> torch.Tensor:
        x = as_tensor(x, self.dtype)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != self.config.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} != configured {self.config.input_shape}")
        return self.features(x)

    def forward_head(self, feature) -> torch.Tensor:
        feature = as_tensor(feature, self.dtype)
        if feature.ndim == 3:
            feature = feature[None]
        if tuple(feature.shape[1:]) != self.feature_shape:
            raise ValueError(f"feature shape {tuple(feature.shape[1:])} != {self.feature_shape}")
        if self.config.head == "avgpool":
            pooled = feature.mean(dim=(2, 3))
        else:
            pooled = feature.flatten(1)
        return self.fc(pooled)

    def forward(self, x) -> torch.Tensor:
        return self.forward_head(self.forward_conv(x))

    def cosine(self, embedding: torch.Tensor) -> torch.Tensor:
        return F.linear(normalize(embedding), normalize(self.weight))

    def logits(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.config.scale * self.cosine(embedding)

    def classify(self, embedding) -> torch.Tensor:
        """Class probabilities softmax(s * cos) without margin."""
        if not self.trained:
            raise RuntimeError("classifier head is untrained")
        return torch.softmax(self.logits(as_tensor(embedding, self.dtype)), dim=-1)

    def classification_loss(self, embedding: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Per-sample -log p_y with the plain (margin-free) classifier."""
        return F.cross_entropy(self.logits(embedding), labels, reduction="none")


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def margin_logits(embedding: torch.Tensor, weight: torch.Tensor, labels: torch.Tensor,
                  scale: float, margin: float) -> torch.Tensor:
    """s * (cos(theta_j) - m * [j == y]) for every class j."""
    cos = F.linear(normalize(embedding), normalize(weight))
    onehot = F.one_hot(labels, cos.shape[-1]).to(cos.dtype)
    return scale * (cos - margin * onehot)


def margin_loss(embedding: torch.Tensor, weight: torch.Tensor, labels: torch.Tensor,
                scale: float = 30.0, margin: float = 0.35) -> torch.Tensor:
    """Large margin cosine loss, averaged over the batch."""
    if scale <= 0 or not 0 <= margin < 1:
        raise ValueError("need scale > 0 and margin in [0, 1)")
    return F.cross_entropy(margin_logits(embedding, weight, labels, scale, margin), labels)


@torch.no_grad()
def extract_features(net: TrunkNet, images, batch_size: int = 256) -> torch.Tensor:
    """Top conv features of many images in inference mode."""
    was_training = net.training
    net.eval()
    images = as_tensor(images, net.dtype)
    feats = [net.forward_conv(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    net.train(was_training)
    if not feats:
        return torch.empty((0,) + net.feature_shape, dtype=net.dtype)
    return torch.cat(feats)


@torch.no_grad()
def head_embeddings(net: TrunkNet, features: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    was_training = net.training
    net.eval()
    out = [net.forward_head(features[i:i + batch_size]) for i in range(0, len(features), batch_size)]
    net.train(was_training)
    if not out:
        return torch.empty((0, net.config.embedding_dim), dtype=net.dtype)
    return torch.cat(out)


@torch.no_grad()
def accuracy(net: TrunkNet, dataset: FaceDataset) -> float:
    emb = head_embeddings(net, extract_features(net, dataset.images))
    pred = net.cosine(emb).argmax(dim=1).numpy()
    return float((pred == dataset.labels).mean())


def _lr_at(epoch: int, epochs: int, base: float, milestones: Sequence[float]) -> float:
    return base * 0.1 ** sum(epoch >= int(round(m * epochs)) for m in milestones)


def train_trunk(dataset: FaceDataset, config: TrunkConfig) -> TrunkNet:
    """Stage 1: train the trunk with the large margin cosine loss."""
    if len(dataset.identities) < 2:
        raise ValueError("need at least two identities to train the trunk")
    if config.num_classes < dataset.num_classes:
        raise ValueError(f"config.num_classes={config.num_classes} < dataset classes {dataset.num_classes}")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    net = TrunkNet(config)
    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    curve = []
    for epoch in range(config.epochs):
        for group in opt.param_groups:
            group["lr"] = _lr_at(epoch, config.epochs, config.lr, config.lr_milestones)
        net.train()
        order = torch.from_numpy(rng.permutation(len(dataset)))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = margin_loss(net(images[idx]), net.weight, labels[idx], config.scale, config.margin)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"trunk loss became {loss.item()} at epoch {epoch}, batch {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(dataset))
        logger.debug("trunk epoch %d loss %.4f", epoch, curve[-1])
    net.eval()
    net.trained = True
    net.meta = {"seed": config.seed, "loss_curve": curve, "train_accuracy": accuracy(net, dataset)}
    return net


@dataclass
class FinetuneConfig:
    epochs: int = 3
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    occlusion_prob: float = 0.5
    area_fraction: float = 0.25
    seed: int = 0
    update_head: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def finetune_trunk(net: TrunkNet, dataset: FaceDataset, config: FinetuneConfig,
                   occlude: Callable[[np.ndarray, np.random.Generator], Tuple[np.ndarray, np.ndarray]],
                   mask_fn: Optional[Callable[[np.ndarray], Optional[torch.Tensor]]] = None,
                   tag: str = "finetune") -> TrunkNet:
    """Continue margin-loss training on randomly occluded faces.

    ``occlude(face, rng)`` returns (occluded_face, region). If ``mask_fn`` is
    given, the top conv feature of every sample is multiplied by
    ``mask_fn(region)`` before the head. Returns a new network; the input is
    left untouched.
    """
    new = copy.deepcopy(net)
    if config.epochs == 0:
        return new
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    params = [p for name, p in new.named_parameters() if config.update_head or name.startswith("features")]
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    ones = torch.ones(new.feature_shape, dtype=new.dtype)
    labels_all = torch.from_numpy(dataset.labels)
    curve = []
    for epoch in range(config.epochs):
        new.train()
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            faces, masks = [], []
            for i in idx:
                face = dataset.images[i]
                mask = ones
                if rng.random() < config.occlusion_prob:
                    face, region = occlude(face, rng)
                    if mask_fn is not None:
                        m = mask_fn(region)
                        mask = ones if m is None else m
                faces.append(face)
                masks.append(mask)
            feats = new.forward_conv(np.stack(faces))
            if mask_fn is not None:
                feats = feats * torch.stack(masks)
            loss = margin_loss(new.forward_head(feats), new.weight, labels_all[idx],
                               new.config.scale, new.config.margin)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"{tag} loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(dataset))
    new.eval()
    new.meta = dict(net.meta, **{f"{tag}_config": config.to_dict(), f"{tag}_loss_curve": curve})
    return new


def trunk_checkpoint(net: TrunkNet) -> Checkpoint:
    return Checkpoint("trunk", net.config.to_dict(), dict(net.meta, trained=net.trained), net.state_dict())


def trunk_id(net: TrunkNet) -> str:
    return trunk_checkpoint(net).checkpoint_id


def save_trunk(net: TrunkNet, path: str | Path) -> str:
    return trunk_checkpoint(net).save(path)


def trunk_from_checkpoint(ckpt: Checkpoint) -> TrunkNet:
    if ckpt.kind != "trunk":
        raise ValueError(f"expected a trunk checkpoint, got {ckpt.kind!r}")
    meta = dict(ckpt.meta)
    trained = bool(meta.pop("trained", False))
    net = TrunkNet(TrunkConfig(**ckpt.config))
    if next(iter(ckpt.state.values())).dtype == torch.float64:
        net.double()
    net.load_state_dict(ckpt.state)
    net.eval()
    net.trained = trained
    net.meta = meta
    return net


def load_trunk(path: str | Path) -> TrunkNet:
    return trunk_from_checkpoint(Checkpoint.load(path))
