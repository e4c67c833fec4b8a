import numpy as np
import pytest

from relight_lab import dataset as ds


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """3 subjects x 3 envs x 2 rotations at 32px; shared across tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    return ds.build_dataset(3, 3, 2, seed=42, out_dir=root, resolution=32,
                            env_height=32)


@pytest.fixture(scope="session")
def tiny_real_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_real")
    return ds.build_real_set(root, 6, seed=7, resolution=32)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
