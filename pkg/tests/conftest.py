import numpy as np
import pytest

from osdg_sched import autodiff as ad
from osdg_sched import datasets
from osdg_sched.networks import ArchConfig, init_networks


@pytest.fixture(autouse=True)
def fresh_graph():
    ad.new_graph()
    yield
    ad.new_graph()


@pytest.fixture(scope="session")
def tiny_ds():
    """4 domains, 5 classes (3 seen / 2 unseen), small cells; shared read-only."""
    return datasets.generate(seed=7, num_domains=4, num_classes=5, num_unseen_classes=2,
                             feature_dim=6, samples_per_cell=24)


@pytest.fixture(scope="session")
def easy_ds():
    """Default-shape dataset at reduced cell size for faster end-to-end tests."""
    return datasets.generate(seed=1, samples_per_cell=60)


@pytest.fixture
def tiny_arch(tiny_ds):
    return ArchConfig(feature_dim=tiny_ds.manifest.feature_dim,
                      num_classes=len(tiny_ds.manifest.seen_class_ids),
                      hidden_widths=(8, 8), rebias_depths=(2, 1))


@pytest.fixture
def tiny_nets(tiny_arch):
    return init_networks(3, tiny_arch)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
