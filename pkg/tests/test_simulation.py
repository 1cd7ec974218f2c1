import numpy as np
import pytest

from sbparcel.data_model import build_preference_matrix
from sbparcel.errors import InvalidSpec, KOutOfRange
from sbparcel.prediction import fit_parcellations
from sbparcel.simulation import (
    LatticeSpec,
    PlantedCohortSpec,
    PredictiveEdge,
    lattice_graph,
    lattice_metrics,
    lattice_preference,
    non_contiguous_nodes,
    run_lattice_experiment,
    supervision_benefit_spec,
    synth_cohort,
    toy_three_voxel,
)
from sbparcel.solver import SBPConfig


def test_two_voxel_lattice():
    assert lattice_graph(LatticeSpec(1, 2)).matrix.tolist() == [[0, 1], [1, 0]]


def test_grid_edges_and_degrees():
    A = lattice_graph(LatticeSpec()).matrix
    assert A.sum() / 2 == 180
    deg = A.sum(axis=1).reshape(10, 10)
    assert deg[0, 0] == deg[9, 9] == deg[0, 9] == 2
    assert deg[0, 5] == deg[5, 0] == 3
    assert deg[5, 5] == 4


def test_default_preference_support():
    R = lattice_preference(LatticeSpec()).matrix
    # 1-based voxels 1..10 against 11..20, and (i, i+1) for i = 8, 18, ..., 98
    expected = {(i, j) for i in range(10) for j in range(10, 20)}
    expected |= {(i - 1, i) for i in range(8, 99, 10)}
    expected |= {(b, a) for a, b in expected}
    assert set(zip(*np.nonzero(R))) == expected
    assert np.all(R[R != 0] == 1.0)


def test_preference_scaling_and_empty():
    base = lattice_preference(LatticeSpec()).matrix
    assert np.array_equal(lattice_preference(LatticeSpec(penalty_value=2.0)).matrix, 2 * base)
    assert not lattice_preference(LatticeSpec(forbidden_pairs=())).matrix.any()
    with pytest.raises(InvalidSpec):
        LatticeSpec(forbidden_pairs=((0, 0),))


def test_non_contiguous_detection():
    A = lattice_graph(LatticeSpec(1, 4)).matrix
    assert non_contiguous_nodes([0, 0, 1, 1], A) == []
    assert non_contiguous_nodes([0, 1, 0, 1], A) == [0, 1]


def test_metrics_from_labels():
    spec = LatticeSpec(2, 3)
    m = lattice_metrics(np.zeros(6, int), spec)
    assert m["co_clustered_forbidden_pairs"] == len(spec.forbidden_pairs)
    assert m["total_penalty"] == 2 * len(spec.forbidden_pairs)


def test_lattice_small_run_deterministic():
    spec = LatticeSpec(6, 6)
    a = run_lattice_experiment(spec, 6, (0.0, 10.0), SBPConfig(K=6, n_restarts=3))
    b = run_lattice_experiment(spec, 6, (0.0, 10.0), SBPConfig(K=6, n_restarts=3))
    for x, y in zip(a, b):
        assert np.array_equal(x["labels"], y["labels"])
    assert a[1]["co_clustered_forbidden_pairs"] == 0
    with pytest.raises(KOutOfRange):
        run_lattice_experiment(spec, 37)


def test_toy_scores():
    rep = toy_three_voxel()
    assert rep["homogeneity_score"] == 0.3
    assert rep["supervised_score"] == 0.7
    assert rep["singletons_score"] == 0.5
    assert rep["homogeneity_partition"] == [["V1", "V3"], ["V2"]]
    assert rep["supervised_partition"] == [["V1", "V2"], ["V3"]]


def test_synth_deterministic():
    spec = PlantedCohortSpec(p=12, n=5, K_true=3, seed=4)
    a, b = synth_cohort(spec), synth_cohort(spec)
    assert np.array_equal(a.connectivity_stack(), b.connectivity_stack())
    assert np.array_equal(a.outcomes, b.outcomes)


def test_noiseless_edge_is_extremal():
    edge = PredictiveEdge((0,), (5,))
    c = synth_cohort(PlantedCohortSpec(p=20, n=40, K_true=2, predictive=(edge,), noise=0.0, seed=1))
    R = np.abs(build_preference_matrix(c).matrix)
    assert R[0, 5] == pytest.approx(1.0, abs=1e-9)
    assert R[0, 5] == pytest.approx(R.max(), abs=1e-12)


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        PlantedCohortSpec(p=10, predictive=(PredictiveEdge((0,), (0,)),)).validate()
    with pytest.raises(InvalidSpec):
        PlantedCohortSpec(p=10, predictive=(PredictiveEdge((0,), (99,)),)).validate()
    with pytest.raises(InvalidSpec):
        PlantedCohortSpec(noise=-1).validate()


def test_supervision_splits_the_predictive_block():
    spec = supervision_benefit_spec(seed=0, n=120)
    c = synth_cohort(spec)
    e = spec.predictive[0]
    parcs = fit_parcellations(c, 6, [0.0, 1.0], "mean-squared", SBPConfig(K=6, n_restarts=5), seed=0)

    def merged(parc):
        la, lb = parc.labels[list(e.group_a)], parc.labels[list(e.group_b)]
        return np.mean(la[:, None] == lb[None, :])

    assert merged(parcs[0.0]) == 1.0
    assert merged(parcs[1.0]) == 0.0
