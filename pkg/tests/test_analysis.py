import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from fdmface.analysis import (AblationGrid, MedReport, ablation_tables, channel_profile, lower_median, med,
                              mean_mask_render, occluder_region, overlap_ratio, receptive_field_overlap,
                              receptive_intervals, relative_change, run_ablation)
from fdmface.dictionary import MaskDictionary, StateError
from fdmface.experiment import DataConfig, DictionaryConfig, PipelineConfig, train_generators
from fdmface.occlusion import OccluderSpec, apply_occluder
from fdmface.pdsn import MaskGeneratorConfig
from fdmface.trunk import TrunkConfig, extract_features


def test_relative_change_examples():
    x = torch.rand(2, 3, 3)
    assert not relative_change(x, x).any()
    assert relative_change(torch.tensor([2.0]), torch.tensor([1.0])).item() == 0.5
    assert relative_change(torch.tensor([0.0]), torch.tensor([1.0]), 1e-6).item() == pytest.approx(1e6)
    with pytest.raises(ValueError):
        relative_change(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ValueError):
        relative_change(torch.zeros(2), torch.zeros(2), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-9, 1.0))
def test_relative_change_is_finite(values, eps):
    v = torch.tensor(values, dtype=torch.float64)
    assert torch.isfinite(relative_change(v, v.flip(0), eps)).all()


def test_lower_median_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for n in range(1, 12):
        r = rng.integers(0, 5, size=(n, 3, 2)).astype(np.float64)
        expected = np.sort(r, axis=0)[math.ceil(n / 2) - 1]
        got = lower_median(torch.from_numpy(r)).numpy()
        assert np.array_equal(got, expected)
        assert np.array_equal(lower_median(torch.from_numpy(r[rng.permutation(n)])).numpy(), expected)


def test_med_single_face_and_order(toy_trunk, toy_splits, grid, corpus):
    faces = toy_splits[2].images
    tid = corpus.ids(sprites=False)[0]
    spec = OccluderSpec(tid, grid.block_rect(13))
    one = med(toy_trunk, faces[:1], spec, corpus, N=1)
    occ = apply_occluder(faces[0], spec, corpus)[0]
    r = relative_change(extract_features(toy_trunk, faces[:1]), extract_features(toy_trunk, occ[None]))[0]
    assert np.array_equal(one.med, r.numpy())
    a = med(toy_trunk, faces[:9], spec, corpus, N=9)
    b = med(toy_trunk, faces[:9][::-1], spec, corpus, N=9)
    assert np.array_equal(a.med, b.med)
    assert a.n == 9 and (a.med >= 0).all()
    with pytest.raises(ValueError):
        med(toy_trunk, faces[:3], spec, corpus, N=4)


def _ones_replica(geometry):
    # linear stand-in with the trunk's geometry: all-ones convs, average pools
    layers = []
    for k, s, p in geometry:
        if s == 1:
            conv = torch.nn.Conv2d(1, 1, k, stride=s, padding=p, bias=False)
            torch.nn.init.ones_(conv.weight)
            layers.append(conv)
        else:
            layers.append(torch.nn.AvgPool2d(k, stride=s, padding=p))
    return torch.nn.Sequential(*layers).double()


def test_receptive_field_matches_autograd_oracle(toy_trunk):
    geometry = toy_trunk.geometry()
    net = _ones_replica(geometry)
    _, fh, fw = toy_trunk.feature_shape
    rows = receptive_intervals(geometry, fh, 40)
    cols = receptive_intervals(geometry, fw, 40)
    for i in range(fh):
        for j in range(fw):
            x = torch.zeros(1, 1, 40, 40, dtype=torch.float64, requires_grad=True)
            net(x + 1.0)[0, 0, i, j].backward()
            support = np.argwhere(x.grad[0, 0].numpy() != 0)
            assert support[:, 0].min() == rows[i][0] and support[:, 0].max() == rows[i][1]
            assert support[:, 1].min() == cols[j][0] and support[:, 1].max() == cols[j][1]


def test_receptive_field_overlap(toy_trunk, grid):
    region = grid.block_mask([1])
    overlap = receptive_field_overlap(toy_trunk, region)
    assert overlap[0, 0] and not overlap[-1, -1]
    assert receptive_field_overlap(toy_trunk, np.ones(grid.shape, dtype=bool)).all()


def test_overlap_ratio(toy_trunk, grid):
    spec = OccluderSpec("x", grid.block_rect(1))
    inside = receptive_field_overlap(toy_trunk, occluder_region(spec, grid.shape))
    assert occluder_region(spec, grid.shape).sum() == 64
    values = np.where(inside, 3.0, 1.0)[None].repeat(toy_trunk.feature_shape[0], axis=0)
    assert overlap_ratio(MedReport(values, spec, 1, 1e-6), toy_trunk, grid.shape) == pytest.approx(3.0)
    zero_rest = np.where(inside, 3.0, 0.0)[None].repeat(2, axis=0)
    assert overlap_ratio(MedReport(zero_rest, spec, 1, 1e-6), toy_trunk, grid.shape) == float("inf")
    everywhere = OccluderSpec("x", (0, 0) + grid.shape)
    assert math.isnan(overlap_ratio(MedReport(values, everywhere, 1, 1e-6), toy_trunk, grid.shape))


def test_channel_profile(tmp_path):
    spec = OccluderSpec("x", (0, 0, 1, 1))
    const = MedReport(np.full((4, 3, 3), 0.7), spec, 5, 1e-6)
    prof = channel_profile(const, tmp_path)
    assert np.allclose(prof.mean, 0.7) and prof.coefficient_of_variation == pytest.approx(0.0, abs=1e-12)
    assert len(prof.rows()) == 4
    assert (tmp_path / "channel_profile.tsv").read_text().count("\n") == 5
    assert len(list(tmp_path.glob("med_channel_*.tsv"))) == 4


def _mean_dictionary(value=None, shape=(3, 2, 2)):
    rng = np.random.default_rng(0)
    means = {b: (np.full(shape, value, dtype=np.float32) if value is not None else rng.random(shape).astype(np.float32))
             for b in (7, 8, 9, 12, 13, 14, 17, 18, 19)}
    return MaskDictionary({b: np.ones(shape, dtype=bool) for b in means}, 0.0, shape, "t", means)


def test_mean_mask_render(tmp_path):
    paths = mean_mask_render(_mean_dictionary(0.5), 13, tmp_path)
    assert len(paths) == 3
    assert (np.asarray(Image.open(paths[0])) == 128).all()
    d = _mean_dictionary()
    paths = mean_mask_render(d, 13, tmp_path, channels=[0, 2], scale=4)
    assert len(paths) == 2
    img = np.asarray(Image.open(paths[1]))
    assert img.shape == (8, 8)
    assert np.array_equal(img[::4, ::4], np.round(d.mean_masks[13][2] * 255).astype(np.uint8))
    with pytest.raises(StateError):
        mean_mask_render(MaskDictionary(d.entries, 0.0, d.feature_shape, "t"), 13, tmp_path)
    with pytest.raises(ValueError):
        mean_mask_render(d, 1, tmp_path)


@pytest.fixture(scope="module")
def tiny_config():
    return PipelineConfig(
        data=DataConfig(n_identities=10, per_identity=12, train_per_identity=8, gallery_per_identity=1,
                        probe_per_identity=3),
        trunk=TrunkConfig(widths=(8, 16, 16, 16), embedding_dim=64, epochs=1),
        pdsn=MaskGeneratorConfig(steps=8, batch_size=16, lr=0.01),
        dictionary=DictionaryConfig(pairs=16, batch_size=16),
    )


def test_differential_off_generators_use_zero_lambda(toy_trunk, toy_splits, grid, corpus, tiny_config):
    gens = train_generators(toy_trunk, toy_splits[0], tiny_config, grid, corpus, differential=False)
    assert sorted(gens) == list(grid.central_blocks())
    for g in gens.values():
        assert not g.config.differential and g.config.effective_lam == 0.0


def test_run_ablation_grid(tmp_path, toy_trunk, tiny_config):
    def trunk_fn(seed):
        if seed == 1:
            raise RuntimeError("no trunk for this seed")
        return toy_trunk

    grid = AblationGrid(seeds=(0, 1))
    run_ablation(grid, tiny_config, tmp_path, trunk_fn=trunk_fn)
    tables = ablation_tables(grid)
    header, rows = tables["table1_tau"]
    assert [r[0] for r in rows] == ["0", "0.05", "0.15", "0.25", "0.35", "0.45"]
    assert len(tables["table2_mask_variant"][1]) == 3 and len(tables["table3_differential"][1]) == 2
    # seed 1 failed everywhere but seed 0 filled every cell
    assert all(r["status"] == "failed" for r in grid.rows if r["seed"] == 1)
    ok = [r for r in grid.rows if r["seed"] == 0]
    assert all(r["status"] == "ok" for r in ok)
    assert len(ok) == len(grid.cells()) + 1  # + plain reference
    # tau = 0 means all-ones masks, i.e. the plain trunk
    plain = next(r for r in ok if r["variant"] == "plain")["accuracy"]
    assert grid.lookup(0, True, 0.0, "binary")["accuracy"] == plain
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1] and manifest["failed_cells"] == len(grid.cells())
    for name in ("cells", "table1_tau", "table2_mask_variant", "table3_differential"):
        assert (tmp_path / f"{name}.tsv").exists()
    # rerunning with the same seeds reproduces every cell
    again = run_ablation(AblationGrid(seeds=(0,)), tiny_config, trunk_fn=trunk_fn)
    for r in again.rows:
        assert r["accuracy"] == grid.lookup(0, r["differential"], r["tau"], r["variant"])["accuracy"]
