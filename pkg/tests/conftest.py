"""Pin BLAS to one thread before numpy loads.

Multi-threaded BLAS splits reductions in shape-dependent ways, which breaks
the bit-exactness properties the suite asserts (batched rollouts equal to
single-start rollouts, byte-identical metrics across runs).
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
