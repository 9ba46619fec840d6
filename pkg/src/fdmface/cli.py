"""Command line entry point.

Every command except ``synth`` works on a run directory. The pipeline config
is read from ``--config`` (JSON) or from ``<run>/config.json`` when present,
and artifact ids are accumulated in ``<run>/manifest.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .data import save_manifest, synth_faces
from .dictionary import MaskDictionary, build_dictionary
from .experiment import PipelineConfig, occluded_probes, prepare
from .grid import region_to_blocks
from .matcher import VARIANTS, ProbeSet, finetune_baseline, finetune_stage3, identify
from .occlusion import OccluderCorpus, block_occluder
from .pdsn import load_generator, save_generator, train_mask_generator
from .trunk import load_trunk, save_trunk, train_trunk


class Run:
    """A run directory: config, checkpoints, dictionary, reports and a manifest."""

    def __init__(self, root, config_path=None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        stored = self.root / "config.json"
        if config_path:
            self.config = PipelineConfig.load(config_path)
        elif stored.exists():
            self.config = PipelineConfig.load(stored)
        else:
            self.config = PipelineConfig()
        self.config.save(stored)
        self._splits = None

    @property
    def splits(self):
        if self._splits is None:
            self._splits = prepare(self.config)
        return self._splits

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def record(self, key, value) -> None:
        m = self.manifest()
        m[key] = value
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True))

    def trunk(self, name="trunk"):
        path = self.root / f"{name}.ckpt"
        if not path.exists():
            raise SystemExit(f"{path} missing; run the command that produces it first")
        return load_trunk(path)

    def generator_path(self, block: int) -> Path:
        return self.root / "generators" / f"block_{block:02d}.ckpt"

    def dictionary(self) -> MaskDictionary:
        path = self.root / "dictionary.fdm"
        if not path.exists():
            raise SystemExit(f"{path} missing; run build-dict first")
        return MaskDictionary.load(path)


def cmd_synth(args) -> None:
    faces = synth_faces(args.identities, args.per_identity, (args.size, args.size), seed=args.seed)
    out = Path(args.out)
    manifest = save_manifest(faces, out)
    corpus = OccluderCorpus.procedural(args.per_kind, args.sprites_per_kind, seed=args.seed)
    index = corpus.save(out / "occluders")
    print(f"wrote {len(faces)} faces to {manifest} and {len(corpus)} occluders to {index}")


def cmd_train_trunk(args) -> None:
    run = Run(args.run, args.config)
    s = run.splits
    cfg = dataclasses.replace(run.config.trunk, num_classes=s.train.num_classes, input_shape=s.train.image_shape)
    net = train_trunk(s.train, cfg)
    run.record("trunk", save_trunk(net, run.root / "trunk.ckpt"))
    print(f"trunk train accuracy {net.meta['train_accuracy']:.4f}")


def cmd_train_pdsn(args) -> None:
    run = Run(args.run, args.config)
    s = run.splits
    trunk = run.trunk()
    blocks = args.block or list(s.grid.central_blocks())
    ids = run.manifest().get("generators", {})
    for b in blocks:
        cfg = dataclasses.replace(run.config.pdsn, target_block=b, channels=trunk.feature_shape[0],
                                  differential=not args.no_differential)
        gen = train_mask_generator(trunk, s.train, cfg, s.grid, s.corpus)
        ids[str(b)] = save_generator(gen, run.generator_path(b))
        h = gen.meta["history"]
        print(f"block {b}: cls {np.mean(h['cls'][-20:]):.4f} diff {np.mean(h['diff'][-20:]):.4f}")
    run.record("generators", ids)


def cmd_build_dict(args) -> None:
    run = Run(args.run, args.config)
    s = run.splits
    trunk = run.trunk()
    gens = {}
    for b in s.grid.central_blocks():
        path = run.generator_path(b)
        if not path.exists():
            raise SystemExit(f"{path} missing; run train-pdsn first")
        gens[b] = load_generator(path)
    tau = run.config.dictionary.tau if args.tau is None else args.tau
    d = build_dictionary(gens, trunk, s.train, tau, run.config.dictionary.pairs, s.grid, s.corpus,
                         seed=run.config.pdsn.seed, batch_size=run.config.dictionary.batch_size)
    d.save(run.root / "dictionary.fdm")
    run.record("dictionary", {"path": "dictionary.fdm", "tau": tau})
    for b in args.render or []:
        analysis.mean_mask_render(d, b, run.root / "mean_masks", scale=8)
    print(f"dictionary tau={tau} K={d.K} blocks={list(d.blocks)}")


def cmd_finetune(args) -> None:
    run = Run(args.run, args.config)
    s = run.splits
    trunk = run.trunk()
    if args.mode == "stage3":
        net = finetune_stage3(trunk, run.dictionary(), s.train, run.config.stage3, s.grid, s.corpus,
                              run.config.eval.iou_threshold)
    else:
        net = finetune_baseline(trunk, s.train, run.config.baseline, s.grid, s.corpus)
    run.record(args.mode, save_trunk(net, run.root / f"{args.mode}.ckpt"))
    print(f"{args.mode} checkpoint written")


def cmd_eval(args) -> None:
    run = Run(args.run, args.config)
    s = run.splits
    net = run.trunk(args.model)
    dictionary = None if args.no_fdm else run.dictionary()
    if args.kind == "clean":
        probes = ProbeSet.clean(s.probe)
    else:
        probes, _ = occluded_probes(s.probe, s.grid, s.corpus, run.config.eval, args.kind)
    res = identify(net, dictionary, probes, s.gallery, args.variant)
    tag = f"{args.model}_{args.kind}_{'plain' if args.no_fdm else args.variant}"
    out = run.root / "eval"
    rows = [(i, int(probes.labels[i]), int(res.predictions[i]), int(res.predictions[i] == probes.labels[i]),
             " ".join(map(str, sorted(probes.blocks[i]))), f"{res.scores[i, res.rankings[i, 0]]:.6f}")
            for i in range(len(probes))]
    analysis.write_tsv(out / f"{tag}_rankings.tsv",
                       ["probe", "identity", "predicted", "correct", "occluded_blocks", "top_score"], rows)
    analysis.write_tsv(out / f"{tag}_summary.tsv", ["metric", "value"],
                       [("rank1", f"{res.accuracy:.6f}"), ("probes", len(probes)), ("gallery", len(s.gallery))])
    evals = run.manifest().get("eval", {})
    evals[tag] = res.accuracy
    run.record("eval", evals)
    print(f"{tag} rank-1 {res.accuracy:.4f}")


def cmd_med(args) -> None:
    run = Run(args.run, args.config)
    s = run.splits
    trunk = run.trunk(args.model)
    rng = np.random.default_rng(args.seed)
    spec = block_occluder(args.block, s.grid, rng, s.corpus, split=run.config.eval.occluder_split)
    faces = np.concatenate([s.train.images, s.probe.images])
    report = analysis.med(trunk, faces, spec, s.corpus, args.N, args.epsilon)
    out = run.root / "med"
    profile = analysis.channel_profile(report, out)
    region = analysis.occluder_region(spec, s.grid.shape)
    ratio = analysis.overlap_ratio(report, trunk, s.grid.shape)
    analysis.write_tsv(out / "summary.tsv", ["metric", "value"],
                       [("N", report.n), ("epsilon", report.epsilon), ("texture", spec.texture_id),
                        ("rect", " ".join(map(str, spec.placement_rect))),
                        ("occluded_blocks", " ".join(map(str, sorted(region_to_blocks(region, s.grid))))),
                        ("overlap_to_rest_ratio", f"{ratio:.6f}"),
                        ("channel_cv", f"{profile.coefficient_of_variation:.6f}")])
    np.save(out / "med.npy", report.med)
    print(f"MED N={report.n}: overlap/rest {ratio:.3f}, channel CV {profile.coefficient_of_variation:.3f}")


def cmd_ablate(args) -> None:
    run = Run(args.run, args.config)
    grid = analysis.AblationGrid(taus=tuple(args.taus), variants=tuple(args.variants), seeds=tuple(args.seeds),
                                 base_tau=run.config.dictionary.tau)
    analysis.run_ablation(grid, run.config, run.root / "ablation")
    for name, (header, rows) in analysis.ablation_tables(grid).items():
        print(name)
        for row in [header] + rows:
            print("\t".join(map(str, row)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdmface", description="Occlusion-robust face matching with feature discarding masks")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic face set and occluder corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--identities", type=int, default=60)
    p.add_argument("--per-identity", type=int, default=30)
    p.add_argument("--size", type=int, default=40, help="image side in pixels")
    p.add_argument("--per-kind", type=int, default=12, help="textures per texture kind")
    p.add_argument("--sprites-per-kind", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    def run_parser(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--config", default=None, help="pipeline config JSON (default: <run>/config.json)")
        p.set_defaults(func=func)
        return p

    run_parser("train-trunk", cmd_train_trunk, "train the trunk network")
    p = run_parser("train-pdsn", cmd_train_pdsn, "train mask generators")
    p.add_argument("--block", type=int, nargs="+", help="central block ids (default: all nine)")
    p.add_argument("--no-differential", action="store_true", help="feed the occluded feature and set lambda to 0")
    p = run_parser("build-dict", cmd_build_dict, "build the mask dictionary")
    p.add_argument("--tau", type=float, default=None, help="discarding fraction (default from config)")
    p.add_argument("--render", type=int, nargs="*", help="blocks whose mean masks are written as PNG")
    p = run_parser("finetune", cmd_finetune, "finetune the trunk with dictionary masks or occlusion only")
    p.add_argument("--mode", choices=["stage3", "baseline"], default="stage3")
    p = run_parser("eval", cmd_eval, "rank-1 identification of probes against the gallery")
    p.add_argument("--variant", choices=VARIANTS, default="binary")
    p.add_argument("--model", default="trunk", help="checkpoint name in the run directory (trunk, stage3, baseline)")
    p.add_argument("--kind", choices=["random", "sunglasses", "scarf", "clean"], default="random")
    p.add_argument("--no-fdm", action="store_true", help="plain trunk matching without masks")
    p = run_parser("med", cmd_med, "median relative change of top conv features under a block occluder")
    p.add_argument("--block", type=int, default=13)
    p.add_argument("--N", type=int, default=256, help="number of faces")
    p.add_argument("--epsilon", type=float, default=analysis.MED_EPS)
    p.add_argument("--model", default="trunk")
    p.add_argument("--seed", type=int, default=0)
    p = run_parser("ablate", cmd_ablate, "tau / mask-variant / differential ablation tables")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--taus", type=float, nargs="+", default=list(analysis.TAU_AXIS))
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
