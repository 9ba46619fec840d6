"""Diagnostics: median relative change of top conv features under occlusion,
receptive fields, per-channel profiles, mean-mask rendering and table reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .dictionary import MaskDictionary, StateError, build_dictionary
from .experiment import PipelineConfig, occluded_probes, prepare, train_generators
from .matcher import VARIANTS, identify
from .occlusion import OccluderCorpus, OccluderSpec, apply_occluder
from .trunk import TrunkNet, extract_features, train_trunk

logger = logging.getLogger(__name__)

MED_EPS = 1e-6
TAU_AXIS = (0.0, 0.05, 0.15, 0.25, 0.35, 0.45)


def relative_change(clean_feature, occ_feature, epsilon: float = MED_EPS):
    """|f_clean - f_occ| / max(|f_clean|, epsilon), elementwise."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    clean = torch.as_tensor(clean_feature)
    occ = torch.as_tensor(occ_feature)
    if clean.shape != occ.shape:
        raise ValueError(f"feature shapes differ: {tuple(clean.shape)} vs {tuple(occ.shape)}")
    return (clean - occ).abs() / clean.abs().clamp_min(epsilon)


def lower_median(values: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Order statistic ceil(N/2) (1-based) along ``dim``."""
    n = values.shape[dim]
    return values.kthvalue((n + 1) // 2, dim=dim).values


@dataclass
class MedReport:
    med: np.ndarray  # (C, H, W)
    occluder: OccluderSpec
    n: int
    epsilon: float


def med(trunk: TrunkNet, faces, occluder: OccluderSpec, corpus: OccluderCorpus, N: Optional[int] = 256,
        epsilon: float = MED_EPS) -> MedReport:
    """Elementwise lower median of the relative change over the first N faces,
    all sharing one occluder placement. ``N=None`` uses every face."""
    faces = np.asarray(faces, dtype=np.float32)
    if N is None:
        N = len(faces)
    if N < 1 or N > len(faces):
        raise ValueError(f"N must lie in [1, {len(faces)}], got {N}")
    faces = faces[:N]
    occluded = np.stack([apply_occluder(f, occluder, corpus)[0] for f in faces])
    r = relative_change(extract_features(trunk, faces), extract_features(trunk, occluded), epsilon)
    return MedReport(lower_median(r).numpy(), occluder, N, epsilon)


def receptive_intervals(geometry: Sequence[Tuple[int, int, int]], out_size: int, in_size: int) -> np.ndarray:
    """Input pixel interval [lo, hi] (inclusive, clipped) seen by each output index along one axis."""
    out = []
    for i in range(out_size):
        lo, hi = i, i
        for k, s, p in reversed(geometry):
            lo, hi = lo * s - p, hi * s - p + k - 1
        out.append((max(lo, 0), min(hi, in_size - 1)))
    return np.asarray(out)


def receptive_field_overlap(trunk: TrunkNet, region: np.ndarray) -> np.ndarray:
    """(H, W) boolean map of top conv positions whose receptive field touches the region."""
    region = np.asarray(region, dtype=bool)
    _, fh, fw = trunk.feature_shape
    rows = receptive_intervals(trunk.geometry(), fh, region.shape[0])
    cols = receptive_intervals(trunk.geometry(), fw, region.shape[1])
    out = np.zeros((fh, fw), dtype=bool)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = region[r0:r1 + 1, c0:c1 + 1].any()
    return out


def occluder_region(occluder: OccluderSpec, image_shape: Tuple[int, int]) -> np.ndarray:
    region = np.zeros(image_shape, dtype=bool)
    top, left, bottom, right = occluder.placement_rect
    region[top:bottom, left:right] = True
    return region


def overlap_ratio(report: MedReport, trunk: TrunkNet, image_shape: Tuple[int, int]) -> float:
    """Mean MED at positions whose receptive field meets the occluder over the mean elsewhere.

    NaN when every position meets the occluder, inf when MED is exactly 0 elsewhere.
    """
    inside = receptive_field_overlap(trunk, occluder_region(report.occluder, image_shape))
    inside = np.broadcast_to(inside, report.med.shape)
    if inside.all():
        return float("nan")
    hit, rest = report.med[inside].mean(), report.med[~inside].mean()
    if rest == 0:
        return float("inf") if hit > 0 else float("nan")
    return float(hit / rest)


@dataclass
class ChannelProfile:
    mean: np.ndarray
    max: np.ndarray

    @property
    def coefficient_of_variation(self) -> float:
        m = self.mean.mean()
        return float(self.mean.std() / m) if m > 0 else 0.0

    def rows(self):
        return [(c, float(a), float(b)) for c, (a, b) in enumerate(zip(self.mean, self.max))]


def channel_profile(report: MedReport, out_dir: Optional[str | Path] = None) -> ChannelProfile:
    """Per-channel mean / max MED; optionally writes ``channel_profile.tsv`` and one
    heatmap TSV per channel."""
    flat = report.med.reshape(report.med.shape[0], -1)
    profile = ChannelProfile(flat.mean(axis=1), flat.max(axis=1))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_tsv(out_dir / "channel_profile.tsv", ["channel", "mean_med", "max_med"], profile.rows())
        for c, plane in enumerate(report.med):
            np.savetxt(out_dir / f"med_channel_{c:03d}.tsv", plane, delimiter="\t", fmt="%.6g")
    return profile


def mean_mask_render(dictionary: MaskDictionary, block: int, out_dir: str | Path,
                     channels: Optional[Sequence[int]] = None, scale: int = 1) -> List[Path]:
    """One grayscale PNG per channel of a block's mean mask, value v -> round(255 v)."""
    if dictionary.mean_masks is None:
        raise StateError("dictionary holds no mean masks")
    if block not in dictionary.mean_masks:
        raise ValueError(f"block {block} has no dictionary entry")
    mask = dictionary.mean_masks[block]
    if channels is None:
        channels = range(mask.shape[0])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in channels:
        pixels = render_values(mask[c])
        if scale > 1:
            pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
        path = out_dir / f"mean_mask_b{block:02d}_c{c:03d}.png"
        Image.fromarray(pixels).save(path)
        paths.append(path)
    return paths


def render_values(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_tsv(path: str | Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(header)
        writer.writerows(rows)
    return path


# --- ablation harness -----------------------------------------------------


@dataclass
class AblationGrid:
    """Axes of the ablation and, after ``run_ablation``, one row per evaluated cell.

    Cells: every tau with the binary variant (full generators), every variant
    at ``base_tau`` (full generators), and the binary variant at ``base_tau``
    with differential supervision on and off. Shared cells are run once.
    """

    taus: Tuple[float, ...] = TAU_AXIS
    variants: Tuple[str, ...] = VARIANTS
    differential: Tuple[bool, ...] = (True, False)
    seeds: Tuple[int, ...] = (0,)
    base_tau: float = 0.25
    rows: List[dict] = field(default_factory=list)

    def cells(self) -> List[Tuple[bool, float, str]]:
        wanted = [(True, t, "binary") for t in self.taus]
        wanted += [(True, self.base_tau, v) for v in self.variants]
        wanted += [(d, self.base_tau, "binary") for d in self.differential]
        return list(dict.fromkeys(wanted))

    def lookup(self, seed: int, differential: bool, tau: float, variant: str) -> Optional[dict]:
        for row in self.rows:
            if (row["seed"], row["differential"], row["tau"], row["variant"]) == (seed, differential, tau, variant):
                return row
        return None

    def median(self, differential: bool, tau: float, variant: str) -> float:
        """Median accuracy over seeds; NaN if any seed's cell failed."""
        vals = []
        for seed in self.seeds:
            row = self.lookup(seed, differential, tau, variant)
            if row is None or row["status"] != "ok":
                return float("nan")
            vals.append(row["accuracy"])
        return float(np.median(vals))

    def plain(self) -> float:
        vals = [r["accuracy"] for r in self.rows if r["variant"] == "plain" and r["status"] == "ok"]
        return float(np.median(vals)) if vals else float("nan")


def _ok(seed, differential, tau, variant, accuracy, seconds):
    return {"seed": seed, "differential": differential, "tau": tau, "variant": variant,
            "accuracy": float(accuracy), "status": "ok", "error": "", "seconds": round(seconds, 2)}


def _failed(seed, differential, tau, variant, err):
    return {"seed": seed, "differential": differential, "tau": tau, "variant": variant,
            "accuracy": float("nan"), "status": "failed", "error": f"{type(err).__name__}: {err}", "seconds": 0.0}


def run_ablation(grid: AblationGrid, config: PipelineConfig, out_dir: Optional[str | Path] = None,
                 trunk_fn: Optional[Callable[[int], TrunkNet]] = None,
                 dictionary_fn: Optional[Callable[[int, bool], Optional[MaskDictionary]]] = None) -> AblationGrid:
    """Fill ``grid.rows`` for every seed and cell; failures are recorded, not raised.

    Cells are scored on the trunk the generators were trained against (no
    Stage-3 finetune), so the axes are compared on equal footing.
    ``trunk_fn(seed)`` may supply pre-trained trunks and
    ``dictionary_fn(seed, differential)`` pre-built dictionaries (None: build).
    """
    grid.rows = []
    for seed in grid.seeds:
        cfg = config.with_seed(seed)
        splits = prepare(cfg)
        try:
            if trunk_fn is not None:
                trunk = trunk_fn(seed)
            else:
                tcfg = dataclasses.replace(cfg.trunk, num_classes=splits.train.num_classes,
                                           input_shape=splits.train.image_shape)
                trunk = train_trunk(splits.train, tcfg)
        except Exception as err:  # noqa: BLE001 - recorded per cell
            logger.exception("seed %d: trunk failed", seed)
            grid.rows += [_failed(seed, d, t, v, err) for d, t, v in grid.cells()]
            continue
        probes, _ = occluded_probes(splits.probe, splits.grid, splits.corpus, cfg.eval)
        t0 = time.perf_counter()
        grid.rows.append(_ok(seed, False, 0.0, "plain", identify(trunk, None, probes, splits.gallery).accuracy,
                             time.perf_counter() - t0))
        for differential in dict.fromkeys(d for d, _, _ in grid.cells()):
            arm = [(t, v) for d, t, v in grid.cells() if d == differential]
            try:
                t0 = time.perf_counter()
                dictionary = dictionary_fn(seed, differential) if dictionary_fn is not None else None
                if dictionary is None:
                    gens = train_generators(trunk, splits.train, cfg, splits.grid, splits.corpus, differential)
                    dictionary = build_dictionary(gens, trunk, splits.train, grid.base_tau, cfg.dictionary.pairs,
                                                  splits.grid, splits.corpus, seed=cfg.pdsn.seed,
                                                  batch_size=cfg.dictionary.batch_size)
                build_time = time.perf_counter() - t0
            except Exception as err:  # noqa: BLE001
                logger.exception("seed %d differential=%s: generators failed", seed, differential)
                grid.rows += [_failed(seed, differential, t, v, err) for t, v in arm]
                continue
            for tau, variant in arm:
                try:
                    t0 = time.perf_counter()
                    acc = identify(trunk, dictionary.with_tau(tau), probes, splits.gallery, variant).accuracy
                    grid.rows.append(_ok(seed, differential, tau, variant, acc, build_time + time.perf_counter() - t0))
                except Exception as err:  # noqa: BLE001
                    logger.exception("cell failed")
                    grid.rows.append(_failed(seed, differential, tau, variant, err))
            logger.info("seed %d differential=%s done", seed, differential)
    if out_dir is not None:
        write_ablation_report(grid, config, out_dir)
    return grid


def _fmt(x: float) -> str:
    return "failed" if np.isnan(x) else f"{100 * x:.2f}"


def ablation_tables(grid: AblationGrid) -> Dict[str, Tuple[List[str], List[list]]]:
    """Header and rows of the tau, mask-variant and differential tables (accuracies in percent)."""
    seeds = [f"seed_{s}" for s in grid.seeds]

    def per_seed(d, t, v):
        out = []
        for s in grid.seeds:
            row = grid.lookup(s, d, t, v)
            out.append(_fmt(row["accuracy"]) if row and row["status"] == "ok" else "failed")
        return out

    tau = (["tau"] + seeds + ["median"],
           [[f"{t:g}"] + per_seed(True, t, "binary") + [_fmt(grid.median(True, t, "binary"))] for t in grid.taus])
    names = {"binary": "Binary", "soft": "Soft weight", "soft_binary": "Soft+Binary"}
    variant = (["mask"] + seeds + ["median"],
               [[names.get(v, v)] + per_seed(True, grid.base_tau, v) + [_fmt(grid.median(True, grid.base_tau, v))]
                for v in grid.variants])
    differential = (["differential"] + seeds + ["median"],
                    [["Yes" if d else "No"] + per_seed(d, grid.base_tau, "binary")
                     + [_fmt(grid.median(d, grid.base_tau, "binary"))] for d in sorted(grid.differential)])
    return {"table1_tau": tau, "table2_mask_variant": variant, "table3_differential": differential}


def write_ablation_report(grid: AblationGrid, config: PipelineConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")
    keys = ["seed", "differential", "tau", "variant", "accuracy", "status", "error", "seconds"]
    write_tsv(out_dir / "cells.tsv", keys, [[r[k] for k in keys] for r in grid.rows])
    files = {"cells": "cells.tsv", "config": "config.json"}
    for name, (header, rows) in ablation_tables(grid).items():
        write_tsv(out_dir / f"{name}.tsv", header, rows)
        files[name] = f"{name}.tsv"
    manifest = {"files": files, "seeds": list(grid.seeds), "taus": list(grid.taus),
                "variants": list(grid.variants), "differential": list(grid.differential),
                "base_tau": grid.base_tau, "plain_occluded_median": grid.plain(),
                "failed_cells": sum(r["status"] != "ok" for r in grid.rows)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir
