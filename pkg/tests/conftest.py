import numpy as np
import pytest

from sbparcel.data_model import Cohort, SubjectRecord, VoxelTimeSeries, compute_voxel_connectivity


def make_cohort(n=12, p=8, T=30, seed=0, outcome=None):
    """Random cohort with time series; outcome defaults to standard normal."""
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(n) if outcome is None else np.asarray(outcome, dtype=float)
    subjects = []
    for i in range(n):
        ts = VoxelTimeSeries(rng.standard_normal((p, T)))
        subjects.append(SubjectRecord(f"s{i:03d}", compute_voxel_connectivity(ts), y[i], ts))
    return Cohort(tuple(subjects))


def random_instance(rng, p, K, dim=None, sym=True):
    """Random embedding rows and a symmetric preference matrix."""
    dim = K if dim is None else dim
    U = rng.standard_normal((p, dim))
    R = rng.uniform(-1, 1, (p, p))
    if sym:
        R = (R + R.T) / 2
    np.fill_diagonal(R, 0.0)
    return U, R


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cohort():
    return make_cohort()
