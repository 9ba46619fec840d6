import dataclasses
import math

import numpy as np
import pytest
import torch

from fdmface.data import synth_faces
from fdmface.trunk import (FinetuneConfig, TrunkConfig, TrunkNet, accuracy, extract_features, finetune_trunk,
                           load_trunk, margin_logits, margin_loss, save_trunk, train_trunk, trunk_id)


def _cosface_oracle(emb, weight, labels, s, m):
    # direct per-sample formula in numpy, independent of the torch implementation
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    w = weight / np.linalg.norm(weight, axis=1, keepdims=True)
    cos = e @ w.T
    losses = []
    for i, y in enumerate(labels):
        target = math.exp(s * (cos[i, y] - m))
        others = sum(math.exp(s * cos[i, j]) for j in range(w.shape[0]) if j != y)
        losses.append(-math.log(target / (target + others)))
    return float(np.mean(losses))


def test_margin_loss_matches_formula():
    rng = np.random.default_rng(0)
    emb, weight = rng.normal(size=(6, 5)), rng.normal(size=(4, 5))
    labels = np.array([0, 1, 2, 3, 1, 0])
    got = margin_loss(torch.tensor(emb), torch.tensor(weight), torch.tensor(labels), 30.0, 0.35).item()
    assert got == pytest.approx(_cosface_oracle(emb, weight, labels, 30.0, 0.35), rel=1e-10)


def test_margin_loss_gradient_finite_differences():
    rng = np.random.default_rng(1)
    emb = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    weight = torch.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = torch.tensor([0, 3, 4])
    assert torch.autograd.gradcheck(lambda e, w: margin_loss(e, w, labels, 30.0, 0.35), (emb, weight),
                                    eps=1e-6, atol=1e-4, rtol=1e-4)


def test_zero_margin_is_normalized_softmax():
    rng = np.random.default_rng(2)
    emb, weight = torch.tensor(rng.normal(size=(4, 3))), torch.tensor(rng.normal(size=(3, 3)))
    labels = torch.tensor([0, 1, 2, 0])
    cos = torch.nn.functional.normalize(emb, dim=1) @ torch.nn.functional.normalize(weight, dim=1).T
    expected = torch.nn.functional.cross_entropy(30.0 * cos, labels)
    assert torch.allclose(margin_loss(emb, weight, labels, 30.0, 0.0), expected, atol=1e-12)


def test_loss_increases_with_margin():
    rng = np.random.default_rng(3)
    emb, weight = torch.tensor(rng.normal(size=(8, 6))), torch.tensor(rng.normal(size=(5, 6)))
    labels = torch.tensor(rng.integers(0, 5, size=8))
    values = [margin_loss(emb, weight, labels, 30.0, m).item() for m in (0.0, 0.1, 0.2, 0.35, 0.5)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_margin_logits_only_shift_target():
    emb, weight = torch.randn(2, 3, dtype=torch.float64), torch.randn(4, 3, dtype=torch.float64)
    labels = torch.tensor([1, 3])
    diff = margin_logits(emb, weight, labels, 30.0, 0.0) - margin_logits(emb, weight, labels, 30.0, 0.35)
    expected = torch.zeros(2, 4, dtype=torch.float64)
    expected[0, 1] = expected[1, 3] = 30.0 * 0.35
    assert torch.allclose(diff, expected)


@pytest.mark.parametrize("kwargs", [{"scale": 0.0}, {"margin": 1.0}, {"margin": -0.1}])
def test_bad_hyperparameters(kwargs):
    with pytest.raises(ValueError):
        TrunkConfig(**kwargs)
    emb, weight = torch.randn(2, 3), torch.randn(2, 3)
    args = {"scale": 30.0, "margin": 0.35, **kwargs}
    with pytest.raises(ValueError):
        margin_loss(emb, weight, torch.tensor([0, 1]), **args)


def test_composition_and_shapes():
    cfg = TrunkConfig()
    net = TrunkNet(cfg).eval()
    assert cfg.feature_shape == (32, 5, 5)
    x = torch.rand(3, 1, 40, 40)
    with torch.no_grad():
        f = net.forward_conv(x)
        assert tuple(f.shape[1:]) == (32, 5, 5)
        assert torch.equal(net(x), net.forward_head(f))
    with pytest.raises(ValueError):
        net.forward_conv(torch.rand(1, 1, 32, 32))
    with pytest.raises(ValueError):
        net.forward_head(torch.rand(1, 32, 4, 4))


def test_untrained_classifier_refuses():
    net = TrunkNet(TrunkConfig())
    with pytest.raises(RuntimeError):
        net.classify(torch.randn(1, 64))


def test_toy_trunk_classifies(toy_trunk, toy_splits):
    train, _, probe = toy_splits
    assert toy_trunk.trained
    assert accuracy(toy_trunk, train) >= 0.95
    probs = toy_trunk.classify(toy_trunk(torch.from_numpy(probe.images[:5])).detach())
    assert torch.allclose(probs.sum(dim=1), torch.ones(5), atol=1e-6)
    assert accuracy(toy_trunk, probe) >= 0.7


@pytest.mark.parametrize("seed", [1, 2])
def test_toy_trunk_other_seeds(seed, small_trunk_config):
    train, _, _ = synth_faces(10, 12, (40, 40), seed=seed).split_per_identity([8, 1, 3])
    net = train_trunk(train, dataclasses.replace(small_trunk_config, seed=seed))
    assert net.meta["train_accuracy"] >= 0.95


def test_same_seed_same_weights(toy_splits, small_trunk_config):
    cfg = dataclasses.replace(small_trunk_config, epochs=2)
    a = train_trunk(toy_splits[0], cfg)
    b = train_trunk(toy_splits[0], cfg)
    assert trunk_id(a) == trunk_id(b)
    c = train_trunk(toy_splits[0], dataclasses.replace(cfg, seed=1))
    assert trunk_id(c) != trunk_id(a)


def test_checkpoint_round_trip(tmp_path, toy_trunk, toy_splits):
    path = tmp_path / "trunk.ckpt"
    cid = save_trunk(toy_trunk, path)
    loaded = load_trunk(path)
    assert trunk_id(loaded) == cid == trunk_id(toy_trunk)
    x = toy_splits[2].images[:4]
    assert torch.equal(extract_features(loaded, x), extract_features(toy_trunk, x))


def test_finetune_zero_epochs_is_identity(toy_trunk, toy_splits):
    out = finetune_trunk(toy_trunk, toy_splits[0], FinetuneConfig(epochs=0), lambda face, rng: (face, None))
    assert trunk_id(out) == trunk_id(toy_trunk)


def test_finetune_does_not_touch_input(toy_trunk, toy_splits):
    before = trunk_id(toy_trunk)
    out = finetune_trunk(toy_trunk, toy_splits[0], FinetuneConfig(epochs=1),
                         lambda face, rng: (face, np.zeros(face.shape[1:], dtype=bool)))
    assert trunk_id(toy_trunk) == before
    assert trunk_id(out) != before
