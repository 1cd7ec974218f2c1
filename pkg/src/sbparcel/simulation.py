"""Synthetic inputs: the lattice experiment, the three-voxel toy and planted cohorts."""
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .data_model import (
    Cohort,
    GroupAdjacency,
    PreferenceMatrix,
    SubjectRecord,
    VoxelTimeSeries,
    compute_voxel_connectivity,
)
from .errors import InvalidSpec, KOutOfRange
from .solver import SBPConfig, multi_restart_fit
from .spectral import spectral_embedding


# --------------------------------------------------------------------------
# lattice


def default_forbidden_pairs(rows, cols):
    """Pairs that must not share a node: every voxel of the first row against
    every voxel of the second row, plus the pair straddling the boundary
    between the third-to-last and second-to-last column in every row."""
    pairs = []
    if rows >= 2:
        pairs += [(i, j) for i in range(cols) for j in range(cols, 2 * cols)]
    if cols >= 3:
        pairs += [(r * cols + cols - 3, r * cols + cols - 2) for r in range(rows)]
    return pairs


@dataclass(frozen=True)
class LatticeSpec:
    rows: int = 10
    cols: int = 10
    forbidden_pairs: tuple = None
    penalty_value: float = 1.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise InvalidSpec("lattice needs at least two voxels")
        if not self.penalty_value > 0:
            raise InvalidSpec("penalty_value must be positive")
        pairs = self.forbidden_pairs
        if pairs is None:
            pairs = default_forbidden_pairs(self.rows, self.cols)
        pairs = tuple((int(a), int(b)) for a, b in pairs)
        p = self.rows * self.cols
        for a, b in pairs:
            if not (0 <= a < p and 0 <= b < p) or a == b:
                raise InvalidSpec(f"invalid forbidden pair {(a, b)}")
        object.__setattr__(self, "forbidden_pairs", pairs)

    @property
    def p(self):
        return self.rows * self.cols


def lattice_graph(spec):
    """Binary 4-neighbour adjacency of the grid (row-major voxel order)."""
    r, c = spec.rows, spec.cols
    A = np.zeros((spec.p, spec.p))
    idx = np.arange(spec.p).reshape(r, c)
    right = (idx[:, :-1].ravel(), idx[:, 1:].ravel())
    down = (idx[:-1, :].ravel(), idx[1:, :].ravel())
    for a, b in (right, down):
        A[a, b] = 1.0
        A[b, a] = 1.0
    return GroupAdjacency(A, method=None)


def lattice_preference(spec):
    R = np.zeros((spec.p, spec.p))
    for a, b in spec.forbidden_pairs:
        R[a, b] = R[b, a] = spec.penalty_value
    return PreferenceMatrix(R)


def non_contiguous_nodes(labels, adjacency):
    """Nodes whose voxels form more than one connected piece of ``adjacency``."""
    labels = np.asarray(labels)
    bad = []
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        n_comp, _ = connected_components(adjacency[np.ix_(members, members)], directed=False)
        if n_comp > 1:
            bad.append(int(k))
    return bad


def lattice_metrics(labels, spec):
    """Metrics recomputable from the labels and the ``LatticeSpec`` alone."""
    labels = np.asarray(labels)
    A = lattice_graph(spec).matrix
    R = lattice_preference(spec).matrix
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return {
        "co_clustered_forbidden_pairs": int(sum(labels[a] == labels[b] for a, b in spec.forbidden_pairs)),
        "non_contiguous_nodes": len(non_contiguous_nodes(labels, A)),
        "total_penalty": float(R[same].sum()),
        "node_sizes": np.bincount(labels).tolist(),
    }


def run_lattice_experiment(spec=LatticeSpec(), K=15, lambdas=(0.0, 5.0, 10.0), config=None,
                           self_loops=True):
    """Fit SBP on the lattice for each lambda.

    With ``self_loops`` the embedding is taken from ``A + I`` (unit
    self-connectivity, as in a correlation matrix). The bare grid graph is
    bipartite, so its eigenvalues come in +/- pairs and the top-|eigenvalue|
    vectors include checkerboard modes that tear every node apart.

    Returns a list of dicts with ``lambda``, ``labels`` (rows x cols grid),
    ``objective`` and the metrics of :func:`lattice_metrics`.
    """
    if not 1 <= K <= spec.p:
        raise KOutOfRange(f"K={K} outside [1, {spec.p}]")
    if config is None:
        config = SBPConfig(K=K)
    A = lattice_graph(spec).matrix
    if self_loops:
        A = A + np.eye(spec.p)
    U = spectral_embedding(A, K).U
    R = lattice_preference(spec).matrix
    out = []
    for lam in lambdas:
        cfg = SBPConfig(**{**config.__dict__, "K": K, "lam": float(lam)})
        fit = multi_restart_fit(U, R, cfg)
        labels = fit.labels
        out.append({
            "lambda": float(lam),
            "labels": labels.reshape(spec.rows, spec.cols),
            "objective": fit.objective,
            "converged": fit.converged,
            **lattice_metrics(labels, spec),
        })
    return out


# --------------------------------------------------------------------------
# three-voxel toy

TOY_PAIRS = ((0, 2), (0, 1), (1, 2))
TOY_STRENGTH = (0.8, 0.7, 0.3)
TOY_ASSOCIATION = (0.9, 0.1, 0.5)


def _inter_node_association(partition, assoc):
    node_of = {v: k for k, node in enumerate(partition) for v in node}
    vals = [a for (u, v), a in assoc.items() if node_of[u] != node_of[v]]
    return float(np.mean(vals))


def toy_three_voxel(pairs=TOY_PAIRS, strength=TOY_STRENGTH, association=TOY_ASSOCIATION):
    """Three voxels, three edges: homogeneity-driven vs outcome-driven grouping.

    The homogeneity partition merges the most strongly connected pair; the
    supervised partition is the two-node grouping whose between-node edges
    have the highest average association with the outcome. Each is scored
    by that average association.
    """
    s = dict(zip(pairs, strength))
    a = dict(zip(pairs, association))
    two_node = []
    for pair in pairs:
        rest = ({0, 1, 2} - set(pair)).pop()
        two_node.append((tuple(pair), (rest,)))
    homog = max(two_node, key=lambda part: s[part[0]])
    superv = max(two_node, key=lambda part: _inter_node_association(part, a))
    singletons = ((0,), (1,), (2,))
    return {
        "voxels": ["V1", "V2", "V3"],
        "edges": [{"pair": [f"V{u + 1}", f"V{v + 1}"], "strength": s[(u, v)], "association": a[(u, v)]}
                  for u, v in pairs],
        "homogeneity_partition": [[f"V{v + 1}" for v in node] for node in homog],
        "homogeneity_score": _inter_node_association(homog, a),
        "supervised_partition": [[f"V{v + 1}" for v in node] for node in superv],
        "supervised_score": _inter_node_association(superv, a),
        "singletons_score": _inter_node_association(singletons, a),
    }


# --------------------------------------------------------------------------
# planted cohorts


@dataclass(frozen=True)
class PredictiveEdge:
    """Subject-varying coupling between two voxel groups.

    Group ``b`` follows its block signal with a per-subject coupling drawn
    uniformly from ``coupling``; the realized edge strength (mean voxel
    correlation between the groups) enters the outcome with weight ``effect``.
    """

    group_a: tuple
    group_b: tuple
    effect: float = 1.0
    coupling: tuple = (0.3, 0.95)


@dataclass(frozen=True)
class PlantedCohortSpec:
    p: int = 60
    n: int = 200
    K_true: int = 6
    block_of: tuple = None
    predictive: tuple = ()
    n_timepoints: int = 60
    signal: float = 1.0
    noise: float = 0.5
    outcome_noise: float = 0.0
    seed: int = 0

    def blocks(self):
        if self.block_of is not None:
            b = np.asarray(self.block_of, dtype=np.int64)
        else:
            b = np.repeat(np.arange(self.K_true), int(np.ceil(self.p / self.K_true)))[: self.p]
        return b

    def validate(self):
        if self.p < 2 or self.n < 1 or self.K_true < 1 or self.n_timepoints < 3:
            raise InvalidSpec("p >= 2, n >= 1, K_true >= 1 and n_timepoints >= 3 required")
        b = self.blocks()
        if b.shape != (self.p,) or b.min() < 0:
            raise InvalidSpec("block map must give one non-negative block per voxel")
        if self.noise < 0 or self.outcome_noise < 0:
            raise InvalidSpec("noise levels must be non-negative")
        for e in self.predictive:
            vox = list(e.group_a) + list(e.group_b)
            if not vox or any(not 0 <= v < self.p for v in vox):
                raise InvalidSpec(f"predictive edge references invalid voxels: {e}")
            if set(e.group_a) & set(e.group_b) or not e.group_a or not e.group_b:
                raise InvalidSpec("predictive groups must be non-empty and disjoint")
            if not np.isfinite(e.effect):
                raise InvalidSpec("effect sizes must be finite")
            lo, hi = e.coupling
            if not -1 <= lo <= hi <= 1:
                raise InvalidSpec("coupling range must lie in [-1, 1]")


def halves_edge(block_voxels, effect=1.0, coupling=(0.3, 0.95)):
    """Predictive edge between the two halves of one block."""
    block_voxels = list(block_voxels)
    h = len(block_voxels) // 2
    return PredictiveEdge(tuple(block_voxels[:h]), tuple(block_voxels[h:]), effect, coupling)


def synth_cohort(spec):
    """Generate a planted cohort with voxel time series.

    Voxel ``j`` in block ``b`` carries ``signal * z_b(t) + noise * e_j(t)``
    with independent standard normal latents. For each predictive edge the
    voxels of ``group_b`` instead carry ``c z_b + sqrt(1 - c^2) w`` with a
    per-subject coupling ``c`` and a private latent ``w``. The outcome is the
    effect-weighted sum of the realized group-to-group edge strengths plus
    Gaussian noise of sd ``outcome_noise``. Fully determined by ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    blocks = spec.blocks()
    n_blocks = int(blocks.max()) + 1
    T = spec.n_timepoints
    voxel_ids = tuple(f"v{j}" for j in range(spec.p))
    subjects = []
    for i in range(spec.n):
        z = rng.standard_normal((n_blocks, T))
        base = z[blocks].copy()
        for e in spec.predictive:
            c = rng.uniform(*e.coupling)
            src = z[blocks[e.group_b[0]]]
            base[list(e.group_b)] = c * src + np.sqrt(1.0 - c * c) * rng.standard_normal(T)
        ts = spec.signal * base + spec.noise * rng.standard_normal((spec.p, T))
        conn = compute_voxel_connectivity(VoxelTimeSeries(ts, voxel_ids))
        outcome = 0.0
        for e in spec.predictive:
            outcome += e.effect * conn[np.ix_(list(e.group_a), list(e.group_b))].mean()
        outcome += spec.outcome_noise * rng.standard_normal()
        subjects.append(SubjectRecord(f"sub{i:04d}", conn, outcome, VoxelTimeSeries(ts, voxel_ids)))
    meta = {
        "x": [float(j) for j in range(spec.p)],
        "y": [0.0] * spec.p,
        "z": [0.0] * spec.p,
        "group_tag": ["L" if j < spec.p / 2 else "R" for j in range(spec.p)],
    }
    return Cohort(tuple(subjects), voxel_ids, meta)


def supervision_benefit_spec(seed=0, n=200, p=60, K=6, outcome_noise=0.02):
    """Planted cohort where the only predictive signal is the coupling
    between the two halves of block 0, a block the unsupervised
    parcellation keeps whole."""
    block = p // K
    return PlantedCohortSpec(
        p=p, n=n, K_true=K,
        predictive=(halves_edge(range(block)),),
        outcome_noise=outcome_noise,
        seed=seed,
    )


def three_block_spec(seed=0, n=60, p=30):
    """Strongly separated three-block cohort with an unrelated outcome."""
    return PlantedCohortSpec(p=p, n=n, K_true=3, noise=0.3, outcome_noise=1.0, seed=seed)
