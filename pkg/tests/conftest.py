import numpy as np
import pytest

from clusterbal.core import ClusterSample, Dataset


def make_cluster(rng, m, p=2, cluster_id=0, treatments=None):
    x = rng.standard_normal((m, p))
    a = treatments if treatments is not None else rng.integers(0, 2, size=m)
    y = rng.standard_normal(m)
    return ClusterSample(covariates=x, treatments=a, outcomes=y, cluster_id=cluster_id)


def make_dataset(rng, n, sizes=(2, 4), p=2):
    clusters = []
    for ci in range(n):
        m = int(rng.integers(sizes[0], sizes[1] + 1))
        clusters.append(make_cluster(rng, m, p, cluster_id=ci))
    return Dataset(clusters=tuple(clusters))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
