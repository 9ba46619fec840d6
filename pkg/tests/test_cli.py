import json
import subprocess
import sys

import pytest

from fdmface.cli import build_parser, main
from fdmface.dictionary import MaskDictionary
from fdmface.experiment import DataConfig, DictionaryConfig, OccluderConfig, PipelineConfig
from fdmface.pdsn import MaskGeneratorConfig
from fdmface.trunk import FinetuneConfig, TrunkConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--identities", "6", "--per-identity", "8",
                 "--per-kind", "3", "--sprites-per-kind", "2"]) == 0
    cfg = PipelineConfig(
        data=DataConfig(manifest=str(root / "data" / "manifest.csv"), train_per_identity=5,
                        gallery_per_identity=1, probe_per_identity=2),
        occluders=OccluderConfig(index=str(root / "data" / "occluders" / "index.csv")),
        trunk=TrunkConfig(widths=(4, 8, 8, 8), embedding_dim=16, epochs=2),
        pdsn=MaskGeneratorConfig(steps=3, batch_size=8),
        dictionary=DictionaryConfig(pairs=8, batch_size=8),
        stage3=FinetuneConfig(epochs=1),
        baseline=FinetuneConfig(epochs=1),
    )
    cfg.save(root / "config.json")
    return root


def test_synth_outputs(workspace):
    lines = (workspace / "data" / "manifest.csv").read_text().splitlines()
    assert lines[0] == "path,identity" and len(lines) == 1 + 6 * 8
    assert (workspace / "data" / "occluders" / "index.csv").exists()


def test_full_command_sequence(workspace, capsys):
    run = str(workspace / "run")
    cfg = str(workspace / "config.json")
    assert main(["train-trunk", "--run", run, "--config", cfg]) == 0
    assert main(["train-pdsn", "--run", run]) == 0  # config now read from the run directory
    assert main(["build-dict", "--run", run, "--tau", "0.25", "--render", "13"]) == 0
    assert main(["finetune", "--run", run, "--mode", "stage3"]) == 0
    assert main(["finetune", "--run", run, "--mode", "baseline"]) == 0
    for variant in ("binary", "soft", "soft_binary"):
        assert main(["eval", "--run", run, "--variant", variant, "--model", "stage3"]) == 0
    assert main(["eval", "--run", run, "--no-fdm", "--kind", "clean"]) == 0
    assert main(["med", "--run", run, "--N", "20"]) == 0
    out = capsys.readouterr().out
    assert "rank-1" in out and "MED N=20" in out

    root = workspace / "run"
    manifest = json.loads((root / "manifest.json").read_text())
    assert set(manifest) >= {"trunk", "generators", "dictionary", "stage3", "baseline", "eval"}
    assert sorted(map(int, manifest["generators"])) == [7, 8, 9, 12, 13, 14, 17, 18, 19]
    d = MaskDictionary.load(root / "dictionary.fdm")
    assert d.tau == 0.25 and d.trunk_id == manifest["trunk"]
    assert len(list((root / "mean_masks").glob("*.png"))) == 8
    assert (root / "eval" / "stage3_random_binary_rankings.tsv").exists()
    summary = (root / "med" / "summary.tsv").read_text()
    assert "N\t20" in summary
    assert PipelineConfig.load(root / "config.json").trunk.epochs == 2


def test_ablate_command(workspace):
    run = str(workspace / "ablate")
    assert main(["ablate", "--run", run, "--config", str(workspace / "config.json"), "--seeds", "0",
                 "--taus", "0", "0.25"]) == 0
    rows = (workspace / "ablate" / "ablation" / "table1_tau.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["tau", "seed_0", "median"] and len(rows) == 3


def test_parser_rejects_unknown_variant():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["eval", "--run", "x", "--variant", "hard"])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "fdmface.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "train-trunk", "train-pdsn", "build-dict", "eval", "finetune", "med", "ablate"):
        assert cmd in out.stdout
