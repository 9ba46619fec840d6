"""End-to-end toy pipeline: data, trunk, per-block generators, dictionary,
finetuned models and occluded-probe evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .data import FaceDataset, load_manifest, synth_faces
from .dictionary import MaskDictionary, build_dictionary
from .grid import GridSpec, make_grid, region_to_blocks
from .matcher import (ProbeSet, finetune_baseline, finetune_stage3, identify)
from .occlusion import OccluderCorpus, random_occlude, sprite_occlude
from .pdsn import MaskGenerator, MaskGeneratorConfig, save_generator, train_mask_generator
from .trunk import FinetuneConfig, TrunkConfig, TrunkNet, save_trunk, train_trunk

logger = logging.getLogger(__name__)


@dataclass
class DataConfig:
    manifest: Optional[str] = None  # CSV manifest; synthetic faces when None
    n_identities: int = 60
    per_identity: int = 30
    image_size: Tuple[int, int] = (40, 40)
    train_per_identity: int = 18
    gallery_per_identity: int = 1
    probe_per_identity: int = 11
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)


@dataclass
class OccluderConfig:
    index: Optional[str] = None  # occluder corpus index.csv; procedural corpus when None
    per_kind: int = 12
    sprites_per_kind: int = 6
    test_fraction: float = 0.25
    seed: int = 0


@dataclass
class DictionaryConfig:
    tau: float = 0.25
    pairs: int = 500
    batch_size: int = 128


@dataclass
class EvalConfig:
    area_fraction: float = 0.25
    iou_threshold: float = 0.5
    occluder_split: str = "test"
    seed: int = 1000


@dataclass
class PipelineConfig:
    grid_n: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    occluders: OccluderConfig = field(default_factory=OccluderConfig)
    trunk: TrunkConfig = field(default_factory=lambda: TrunkConfig(epochs=40, embedding_dim=128))
    pdsn: MaskGeneratorConfig = field(default_factory=MaskGeneratorConfig)
    dictionary: DictionaryConfig = field(default_factory=DictionaryConfig)
    stage3: FinetuneConfig = field(default_factory=FinetuneConfig)
    baseline: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        types = {"data": DataConfig, "occluders": OccluderConfig, "trunk": TrunkConfig,
                 "pdsn": MaskGeneratorConfig, "dictionary": DictionaryConfig, "stage3": FinetuneConfig,
                 "baseline": FinetuneConfig, "eval": EvalConfig}
        for key, value in d.items():
            if key not in sections:
                raise ValueError(f"unknown config section {key!r}")
            kwargs[key] = types[key](**value) if key in types else value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every random stream derived from ``seed``."""
        cfg = PipelineConfig.from_dict(self.to_dict())
        cfg.data.seed = seed
        cfg.occluders.seed = seed
        cfg.trunk.seed = seed
        cfg.pdsn.seed = seed
        cfg.stage3.seed = seed
        cfg.baseline.seed = seed
        cfg.eval.seed = seed + 1000
        return cfg


@dataclass
class Splits:
    train: FaceDataset
    gallery: FaceDataset
    probe: FaceDataset
    grid: GridSpec
    corpus: OccluderCorpus


def prepare(config: PipelineConfig) -> Splits:
    d = config.data
    if d.manifest:
        dataset = load_manifest(d.manifest)
    else:
        dataset = synth_faces(d.n_identities, d.per_identity, d.image_size, seed=d.seed)
    train, gallery, probe = dataset.split_per_identity(
        [d.train_per_identity, d.gallery_per_identity, d.probe_per_identity])
    o = config.occluders
    corpus = (OccluderCorpus.load(o.index) if o.index
              else OccluderCorpus.procedural(o.per_kind, o.sprites_per_kind, o.seed, o.test_fraction))
    h, w = dataset.image_shape[1:]
    return Splits(train, gallery, probe, make_grid(h, w, config.grid_n), corpus)


def occluded_probes(probe: FaceDataset, grid: GridSpec, corpus: OccluderCorpus, config: EvalConfig,
                    kind: str = "random") -> Tuple[ProbeSet, np.ndarray]:
    """Occlude every probe once (random rectangle, or a sunglasses / scarf sprite)."""
    rng = np.random.default_rng([config.seed, zlib.crc32(kind.encode())])
    images, regions, blocks = [], [], []
    for face in probe.images:
        if kind == "random":
            occ, region = random_occlude(face, grid, config.area_fraction, rng, corpus, config.occluder_split)
        else:
            occ, region = sprite_occlude(face, grid, kind, rng, corpus, config.occluder_split)
        images.append(occ)
        regions.append(region)
        blocks.append(region_to_blocks(region, grid, config.iou_threshold))
    return ProbeSet(np.stack(images), probe.labels, blocks, kind), np.stack(regions)


def train_generators(trunk: TrunkNet, train: FaceDataset, config: PipelineConfig, grid: GridSpec,
                     corpus: OccluderCorpus, differential: bool = True) -> Dict[int, MaskGenerator]:
    gens = {}
    for b in grid.central_blocks():
        cfg = dataclasses.replace(config.pdsn, target_block=b, differential=differential,
                                  channels=trunk.feature_shape[0])
        gens[b] = train_mask_generator(trunk, train, cfg, grid, corpus)
    return gens


@dataclass
class PipelineResult:
    metrics: Dict[str, float]
    trunk: TrunkNet
    dictionary: MaskDictionary
    stage3: TrunkNet
    baseline: TrunkNet
    generators: Dict[int, MaskGenerator]
    splits: Splits = field(repr=False)
    probes: ProbeSet = field(repr=False)
    timings: Dict[str, float] = field(default_factory=dict)


def run_pipeline(config: PipelineConfig, workdir: Optional[str | Path] = None,
                 trunk: Optional[TrunkNet] = None) -> PipelineResult:
    """Train everything for one seed and evaluate rank-1 on clean and occluded probes.

    Metric keys: ``{model}_{probes}`` with model in trunk / baseline /
    fdm (Stage-2 trunk + dictionary) / fdm_stage3 and probes in clean / occluded.
    """
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    timings = {}
    splits = prepare(config)
    cfg = dataclasses.replace(config.trunk, num_classes=splits.train.num_classes,
                              input_shape=splits.train.image_shape)
    trunk = trunk or train_trunk(splits.train, cfg)
    timings["trunk"] = time.perf_counter() - t0
    gens = train_generators(trunk, splits.train, config, splits.grid, splits.corpus)
    timings["generators"] = time.perf_counter() - t0
    d = config.dictionary
    dictionary = build_dictionary(gens, trunk, splits.train, d.tau, d.pairs, splits.grid, splits.corpus,
                                  seed=config.pdsn.seed, batch_size=d.batch_size)
    timings["dictionary"] = time.perf_counter() - t0
    stage3 = finetune_stage3(trunk, dictionary, splits.train, config.stage3, splits.grid, splits.corpus,
                             config.eval.iou_threshold)
    baseline = finetune_baseline(trunk, splits.train, config.baseline, splits.grid, splits.corpus)
    timings["finetune"] = time.perf_counter() - t0

    probes, _ = occluded_probes(splits.probe, splits.grid, splits.corpus, config.eval)
    clean = ProbeSet.clean(splits.probe)
    metrics = {}
    for name, net, dic in (("trunk", trunk, None), ("baseline", baseline, None),
                           ("fdm", trunk, dictionary), ("fdm_stage3", stage3, dictionary)):
        metrics[f"{name}_clean"] = identify(net, dic, clean, splits.gallery).accuracy
        metrics[f"{name}_occluded"] = identify(net, dic, probes, splits.gallery).accuracy
    metrics["trunk_train_accuracy"] = trunk.meta["train_accuracy"]
    timings["total"] = time.perf_counter() - t0
    result = PipelineResult(metrics, trunk, dictionary, stage3, baseline, gens, splits, probes, timings)
    if workdir is not None:
        save_run(result, config, workdir)
    return result


def save_run(result: PipelineResult, config: PipelineConfig, workdir: str | Path) -> Path:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    config.save(workdir / "config.json")
    manifest = {"trunk": save_trunk(result.trunk, workdir / "trunk.ckpt"),
                "stage3": save_trunk(result.stage3, workdir / "stage3.ckpt"),
                "baseline": save_trunk(result.baseline, workdir / "baseline.ckpt"),
                "generators": {b: save_generator(g, workdir / "generators" / f"block_{b:02d}.ckpt")
                               for b, g in result.generators.items()}}
    result.dictionary.save(workdir / "dictionary.fdm")
    manifest["dictionary"] = "dictionary.fdm"
    manifest["metrics"] = result.metrics
    manifest["timings"] = result.timings
    (workdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return workdir
