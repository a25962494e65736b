import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_kernel(rng, k=3, m_in=2, m_out=2, scale=1.0):
    return (scale * rng.standard_normal((k, k, m_in, m_out))).astype(np.float32)


def random_map(rng, n=8, c=2):
    return rng.standard_normal((n, n, c)).astype(np.float32)


def delta_kernel(k=3, m=1):
    """Identity kernel: centered spatial delta on matched channels."""
    K = np.zeros((k, k, m, m), dtype=np.float32)
    for c in range(m):
        K[k // 2, k // 2, c, c] = 1.0
    return K
