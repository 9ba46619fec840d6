import numpy as np
import pytest
import torch

from fdmface.data import synth_faces
from fdmface.grid import make_grid
from fdmface.occlusion import OccluderCorpus
from fdmface.dictionary import build_dictionary
from fdmface.pdsn import MaskGeneratorConfig, train_mask_generator
from fdmface.trunk import TrunkConfig, train_trunk

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def grid():
    return make_grid(40, 40, 5)


@pytest.fixture(scope="session")
def corpus():
    return OccluderCorpus.procedural(per_kind=4, sprites_per_kind=3, seed=0)


@pytest.fixture(scope="session")
def faces():
    return synth_faces(n_identities=10, per_identity=12, image_size=(40, 40), seed=0)


@pytest.fixture(scope="session")
def toy_splits(faces):
    """train / gallery / probe split of the 10-identity toy set."""
    return faces.split_per_identity([8, 1, 3])


@pytest.fixture(scope="session")
def small_trunk_config():
    return TrunkConfig(input_shape=(1, 40, 40), widths=(8, 16, 16, 16), num_classes=10, embedding_dim=64,
                       epochs=100, batch_size=16, lr=0.02, seed=0)


@pytest.fixture(scope="session")
def toy_trunk(toy_splits, small_trunk_config):
    """Trunk trained on the 10-identity toy set (shared, never mutated by tests)."""
    return train_trunk(toy_splits[0], small_trunk_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_generator_config():
    return MaskGeneratorConfig(channels=16, target_block=13, lr=0.01, steps=150, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def toy_generator(toy_trunk, toy_splits, toy_generator_config, grid, corpus):
    """Block-13 generator on the toy trunk, with a held-out diff curve (probe split)."""
    return train_mask_generator(toy_trunk, toy_splits[0], toy_generator_config, grid, corpus,
                                heldout=toy_splits[2], eval_every=25)


@pytest.fixture(scope="session")
def toy_dictionary(toy_trunk, toy_splits, grid, corpus):
    """tau=0.25 dictionary from nine briefly trained toy generators."""
    gens = {}
    for b in grid.central_blocks():
        cfg = MaskGeneratorConfig(channels=16, target_block=b, lr=0.01, steps=60, batch_size=32, seed=b)
        gens[b] = train_mask_generator(toy_trunk, toy_splits[0], cfg, grid, corpus)
    return build_dictionary(gens, toy_trunk, toy_splits[0], 0.25, 64, grid, corpus, batch_size=64)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance check; printed in the terminal summary."""

    def record(name: str, ok, detail: str):
        # ok=None marks an informational line
        line = f"{'INFO' if ok is None else 'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
