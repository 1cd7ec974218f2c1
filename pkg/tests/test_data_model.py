import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbparcel import data_model as dm
from sbparcel.data_model import (
    AggregationMethod,
    Cohort,
    PreferenceMode,
    SubjectRecord,
    VoxelTimeSeries,
    aggregate_adjacency,
    build_preference_matrix,
    compute_voxel_connectivity,
    load_cohort,
    write_cohort,
)
from sbparcel.errors import ConstantSeries, DegenerateOutcome, MissingOutcome, TooFewSubjects
from sbparcel.matrix_io import write_matrix_csv

from conftest import make_cohort


def _scalar_pearson(x, y):
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def _cohort_from_mats(mats, y):
    return Cohort(tuple(SubjectRecord(f"s{i}", m, y[i]) for i, m in enumerate(mats)))


# --- connectivity -----------------------------------------------------------

def test_identical_rows_correlate_one():
    c = compute_voxel_connectivity(np.array([[1.0, 2, 4, 3], [1.0, 2, 4, 3]]))
    assert c[0, 1] == 1.0


def test_anticorrelated_rows():
    a = np.array([1.0, -2, 0.5, 3])
    c = compute_voxel_connectivity(np.vstack([a, -a]))
    assert c[0, 1] == pytest.approx(-1.0, abs=1e-15)


def test_hand_pearson_value():
    c = compute_voxel_connectivity(np.array([[1.0, 2, 3, 4], [1.0, 3, 2, 4]]))
    assert c[0, 1] == pytest.approx(0.8, abs=1e-14)
    assert c[0, 1] == pytest.approx(_scalar_pearson([1, 2, 3, 4], [1, 3, 2, 4]), abs=1e-14)


def test_constant_series_named():
    ts = VoxelTimeSeries(np.array([[1.0, 2, 3], [5.0, 5, 5]]), ("a", "b"))
    with pytest.raises(ConstantSeries) as err:
        compute_voxel_connectivity(ts)
    assert err.value.voxel_id == "b"


def test_connectivity_symmetric_unit_diagonal(rng):
    c = compute_voxel_connectivity(rng.standard_normal((15, 40)))
    assert np.array_equal(c, c.T)
    assert np.all(np.diag(c) == 1.0)
    assert np.abs(c).max() <= 1.0


# --- aggregation ------------------------------------------------------------

PAIR = [np.array([[1, 0.5], [0.5, 1]]), np.array([[1, 0.3], [0.3, 1]])]


def test_mean_aggregation():
    A = aggregate_adjacency(_cohort_from_mats(PAIR, [0, 1]), AggregationMethod.MEAN).matrix
    assert np.allclose(A, [[1, 0.4], [0.4, 1]], atol=1e-15)


def test_mean_squared_aggregation():
    A = aggregate_adjacency(_cohort_from_mats(PAIR, [0, 1]), "mean-squared").matrix
    assert A[0, 1] == pytest.approx(0.17, abs=1e-15)
    assert A[0, 0] == 1.0


def test_single_subject_mean_exact(small_cohort):
    one = small_cohort.subset([3])
    A = aggregate_adjacency(one, AggregationMethod.MEAN).matrix
    assert np.array_equal(A, one.subjects[0].connectivity)


def test_debiased_literal_formula():
    A = aggregate_adjacency(_cohort_from_mats(PAIR, [0, 1]), AggregationMethod.MEAN_SQUARED_DEBIASED).matrix
    # diag: mean of (1 - row sum); row sums 1.5 and 1.3
    assert A[0, 0] == pytest.approx(((1 - 1.5) + (1 - 1.3)) / 2, abs=1e-15)
    assert A[0, 1] == pytest.approx(0.17, abs=1e-15)


def test_debiased_sqdeg_variant():
    A = aggregate_adjacency(_cohort_from_mats(PAIR, [0, 1]), AggregationMethod.MEAN_SQUARED_DEBIASED_SQDEG).matrix
    assert A[0, 0] == pytest.approx(((1 - 1.25) + (1 - 1.09)) / 2, abs=1e-15)


@pytest.mark.parametrize("method", list(AggregationMethod))
def test_aggregate_symmetric(method):
    A = aggregate_adjacency(make_cohort(n=6, p=10, seed=3), method).matrix
    assert np.abs(A - A.T).max() <= 1e-12


def test_mean_aggregation_linear(small_cohort):
    c = 0.37
    scaled = Cohort(tuple(SubjectRecord(s.id, s.connectivity * c, s.outcome) for s in small_cohort.subjects))
    A = aggregate_adjacency(small_cohort, "mean").matrix
    B = aggregate_adjacency(scaled, "mean").matrix
    assert np.allclose(B, c * A, atol=1e-14)


# --- preference matrix ------------------------------------------------------

def _edge_cohort(edge_vals, y, p=3):
    mats = []
    for v in edge_vals:
        m = np.eye(p)
        m[0, 1] = m[1, 0] = v
        mats.append(m)
    return _cohort_from_mats(mats, y)


def test_edge_equal_to_outcome_gives_one():
    vals = [0.1, -0.4, 0.25, 0.7, 0.0]
    R = build_preference_matrix(_edge_cohort(vals, vals)).matrix
    assert R[0, 1] == pytest.approx(1.0, abs=1e-14)
    assert R[1, 0] == R[0, 1]


def test_perfect_reversal():
    R = build_preference_matrix(_edge_cohort([0.1, 0.2, 0.3], [3, 2, 1])).matrix
    assert R[0, 1] == pytest.approx(-1.0, abs=1e-14)


def test_constant_edge_zero_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        R = build_preference_matrix(_edge_cohort([0.1, 0.2, 0.3], [3, 2, 1])).matrix
    # edges (0,2) and (1,2) are 0 in every subject
    assert R[0, 2] == 0 and R[1, 2] == 0
    assert np.all(np.diag(R) == 0)
    assert "constant" in caplog.text


def test_preference_matches_scalar_pearson(rng):
    c = make_cohort(n=15, p=12, seed=7)
    R = build_preference_matrix(c).matrix
    stack = c.connectivity_stack()
    for _ in range(100):
        j, l = rng.choice(12, 2, replace=False)
        assert R[j, l] == pytest.approx(_scalar_pearson(stack[:, j, l], c.outcomes), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_preference_affine_invariance(a, b):
    c = make_cohort(n=10, p=6, seed=11)
    R = build_preference_matrix(c).matrix

    def with_y(y):
        return Cohort(tuple(SubjectRecord(s.id, s.connectivity, v) for s, v in zip(c.subjects, y)))

    assert np.allclose(build_preference_matrix(with_y(a * c.outcomes + b)).matrix, R, atol=1e-9)
    assert np.allclose(build_preference_matrix(with_y(-a * c.outcomes + b)).matrix, -R, atol=1e-9)


def test_inverse_pvalue_mode():
    c = make_cohort(n=20, p=6, seed=2)
    r = build_preference_matrix(c).matrix
    inv = build_preference_matrix(c, PreferenceMode.INVERSE_PVALUE).matrix
    off = ~np.eye(6, dtype=bool)
    expected = 1.0 / dm.correlation_pvalue(r[off], 20)
    assert np.allclose(inv[off], expected, rtol=1e-10)
    assert np.all(np.diag(inv) == 0)
    # larger |r| means larger preference
    order = np.argsort(np.abs(r[off]))
    assert np.all(np.diff(inv[off][order]) >= -1e-9)


def test_inverse_pvalue_cap():
    vals = [0.1, -0.4, 0.25, 0.7, 0.0]
    R = build_preference_matrix(_edge_cohort(vals, vals), "inverse-pvalue", cap=1e6).matrix
    assert R[0, 1] == 1e6


def test_preference_errors():
    with pytest.raises(TooFewSubjects):
        build_preference_matrix(_edge_cohort([0.1, 0.2], [1, 2]))
    with pytest.raises(DegenerateOutcome):
        build_preference_matrix(_edge_cohort([0.1, 0.2, 0.3], [1, 1, 1]))


# --- containers -------------------------------------------------------------

def test_subject_record_validation():
    with pytest.raises(ValueError):
        SubjectRecord("x", np.array([[1, 0.2], [0.3, 1]]), 0.0)
    with pytest.raises(ValueError):
        SubjectRecord("x", np.array([[1, 1.5], [1.5, 1]]), 0.0)


def test_cohort_arrays_read_only(small_cohort):
    with pytest.raises(ValueError):
        small_cohort.subjects[0].connectivity[0, 0] = 2.0
    with pytest.raises(ValueError):
        small_cohort.connectivity_stack()[0, 0, 0] = 2.0


# --- manifest I/O -----------------------------------------------------------

def _manifest(tmp_path, mats, outcomes, policy="abort"):
    subs = []
    for i, m in enumerate(mats):
        write_matrix_csv(tmp_path / f"m{i}.csv", m)
        subs.append({"id": f"s{i}", "matrix_file": f"m{i}.csv"})
    (tmp_path / "y.csv").write_text("id,outcome\n" + "".join(f"{k},{v}\n" for k, v in outcomes.items()))
    man = {"subjects": subs, "outcomes": "y.csv", "missing_policy": policy}
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    return tmp_path / "manifest.json"


def test_load_two_subjects(tmp_path):
    path = _manifest(tmp_path, PAIR, {"s0": 1.0, "s1": 2.0})
    c = load_cohort(path)
    assert c.n == 2 and c.p == 2
    assert np.array_equal(c.subjects[1].connectivity, PAIR[1])


def test_missing_outcome(tmp_path):
    path = _manifest(tmp_path, PAIR, {"s0": 1.0})
    with pytest.raises(MissingOutcome) as err:
        load_cohort(path)
    assert err.value.subject_id == "s1"


def test_drop_voxel_policy(tmp_path):
    a = np.array([[1, 0.2, 0.1], [0.2, 1, 0.3], [0.1, 0.3, 1]])
    b = a.copy()
    b[0, :] = b[:, 0] = np.nan
    c = load_cohort(_manifest(tmp_path, [a, b, a], {"s0": 1, "s1": 2, "s2": 3}, "drop-voxel"))
    assert c.p == 2
    assert c.voxel_ids == ("v1", "v2")
    assert np.array_equal(c.subjects[0].connectivity, a[1:, 1:])


def test_abort_policy_raises(tmp_path):
    a = np.array([[1, 0.2], [0.2, 1]])
    b = a.copy()
    b[0, 1] = b[1, 0] = np.nan
    with pytest.raises(dm.NonFiniteData):
        load_cohort(_manifest(tmp_path, [a, b], {"s0": 1, "s1": 2}))


def test_write_then_load_round_trip(tmp_path):
    c = make_cohort(n=5, p=4, seed=1)
    for fmt in ("binary", "csv"):
        write_cohort(c, tmp_path / fmt, matrix_format=fmt)
        back = load_cohort(tmp_path / fmt / "manifest.json")
        assert back.ids == c.ids
        assert np.array_equal(back.outcomes, c.outcomes)
        assert np.array_equal(back.connectivity_stack(), c.connectivity_stack())
