import itertools
import math

import numpy as np
import pytest


def compositions(n, k):
    """All ordered k-tuples of positive integers summing to n."""
    for cuts in itertools.combinations(range(1, n), k - 1):
        b = (0,) + cuts + (n,)
        yield tuple(b[i + 1] - b[i] for i in range(k))


def gfc_by_compositions(n, k, alpha):
    """(-1)^n C(n, k; -alpha) = (1/k!) sum over compositions of n!/prod n_j! prod (alpha)_{n_j}."""
    total = 0.0
    for comp in compositions(n, k):
        term = math.factorial(n)
        for nj in comp:
            term *= math.gamma(alpha + nj) / math.gamma(alpha) / math.factorial(nj)
        total += term
    return total / math.factorial(k)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
