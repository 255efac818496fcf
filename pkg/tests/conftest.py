import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sinkhorn_clt import DiscreteMeasure  # noqa: E402


def random_measure(rng, n, d, scale=1.0):
    pts = rng.uniform(0, scale, size=(n, d))
    w = rng.uniform(0.2, 1.0, size=n)
    return DiscreteMeasure.from_arrays(pts, w / w.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_atom():
    return DiscreteMeasure.from_arrays([[0.0], [1.0]], [0.5, 0.5])


@pytest.fixture
def skewed_pair():
    P = DiscreteMeasure.from_arrays([[0.0], [1.0]], [0.3, 0.7])
    Q = DiscreteMeasure.from_arrays([[0.0], [1.0]], [0.5, 0.5])
    return P, Q


@pytest.fixture
def planar_pair():
    P = DiscreteMeasure.from_arrays([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [0.2, 0.3, 0.5])
    Q = DiscreteMeasure.from_arrays(
        [[0.5, 0.5], [1.0, 1.0], [-0.5, 0.2], [0.3, -0.4]], [0.25, 0.25, 0.3, 0.2]
    )
    return P, Q
