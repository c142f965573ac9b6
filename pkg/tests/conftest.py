import numpy as np
import pytest

from defnet.data import SceneSpec, generate_dataset, load_manifest


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """A small generated dataset shared by the slower integration tests.

    Returns (root_dir, {split: manifest}).  Generated once per session;
    tests must not mutate the files.
    """
    root = tmp_path_factory.mktemp("tiny-world")
    spec = SceneSpec()
    manifests = generate_dataset(
        spec, {"train": 24, "val": 10, "test": 8}, seed=7, out_dir=root
    )
    return root, manifests


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
