import os

# single-thread BLAS: the determinism contracts are stated for one thread
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small on-disk corner dataset shared by trainer/metrics/cli tests."""
    from deskgan.data import SyntheticSpec, generate_dataset, load_dataset

    root = tmp_path_factory.mktemp("data")
    spec = SyntheticSpec(resolution=16, num_classes=4, samples_per_class=40,
                         seed=77)
    generate_dataset(spec, root)
    images, labels, loaded_spec = load_dataset(root)
    return {"dir": str(root), "images": images, "labels": labels, "spec": loaded_spec}
