import numpy as np
import pytest
from hypothesis import settings

from augkernel.graph import AugmentationGraph

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_graph(rng, n_images=None, n_views=None, sparsity=0.0) -> AugmentationGraph:
    """Random graph with every view reachable."""
    n_images = n_images or int(rng.integers(2, 8))
    n_views = n_views or int(rng.integers(2, 12))
    cond = rng.random((n_images, n_views)) + 1e-3
    if sparsity:
        cond *= rng.random(cond.shape) > sparsity
        cond[rng.integers(n_images, size=n_views), np.arange(n_views)] += 0.5
        cond[np.arange(n_images), rng.integers(n_views, size=n_images)] += 0.5
    cond /= cond.sum(axis=1, keepdims=True)
    prior = rng.random(n_images) + 0.1
    prior /= prior.sum()
    labels = rng.integers(0, 2, n_views)
    groups = rng.integers(0, 2, n_views)
    return AugmentationGraph(cond, prior, labels, groups)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
