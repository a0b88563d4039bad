import numpy as np
import pytest

from proxyfl.data import blob_means, partition, PartitionSpec, sample_blobs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, step=1e-6):
    """Full central finite-difference gradient of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def skewed_blobs(seed, num_clients=4, per_client=200, num_classes=5, dim=6, separation=4.0,
                 p_major=0.8, clusters=1, test_per_class=60):
    rng = np.random.default_rng(seed)
    means = blob_means(num_classes, dim, separation, rng, clusters)
    train = sample_blobs(means, per_client * num_clients // num_classes + per_client, rng)
    test = sample_blobs(means, test_per_class, rng)
    parts = partition(train, PartitionSpec("MajorityClass", per_client, num_clients,
                                           p_major=p_major), rng)
    return parts, test
