"""Node-level connectomes, connectome-based prediction (CPM) and nested CV for lambda."""
import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_model import (
    AggregationMethod,
    PreferenceMode,
    aggregate_adjacency,
    build_preference_matrix,
    compute_voxel_connectivity,
    correlation_pvalue,
    pearson_with_outcome,
)
from .errors import (
    ConstantSeries,
    DegenerateOutcome,
    DegenerateTruth,
    DimensionMismatch,
    EmptyNode,
    NoEdgesSelected,
    SBPError,
    TooFewSubjects,
)
from .parcellation import Parcellation
from .seeding import derive_seed, rng_for
from .solver import SBPConfig, multi_restart_fit
from .spectral import spectral_embedding

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (0.0, 0.01, 0.1, 1.0, 10.0)


@dataclass(frozen=True)
class NodeConnectome:
    matrix: np.ndarray
    subject_id: str = ""


def _membership(parc, p):
    if parc.p != p:
        raise DimensionMismatch(f"parcellation covers {parc.p} voxels, data has {p}")
    sizes = parc.sizes()
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        raise EmptyNode(int(empty[0]))
    return parc.one_hot(), sizes


def node_connectome_from_timeseries(ts, parc, subject_id=""):
    """Correlate node-averaged time courses.

    Node ``k``'s course is the mean of its member voxels' courses at each
    time point.
    """
    values = getattr(ts, "values", ts)
    M, sizes = _membership(parc, values.shape[0])
    courses = (M / sizes).T @ values
    try:
        mat = compute_voxel_connectivity(courses)
    except ConstantSeries as exc:
        raise ConstantSeries(f"node{exc.voxel_id[1:]}") from None
    return NodeConnectome(mat, subject_id)


def node_connectome_from_voxel_matrix(A_i, parc, subject_id=""):
    """Block-average a voxel connectivity matrix onto the nodes.

    Off-diagonal entry ``(k, k')`` is the mean of ``a_jl`` over
    ``j in C_k, l in C_k'``; the diagonal is 1.
    """
    a = np.asarray(getattr(A_i, "connectivity", A_i), dtype=np.float64)
    M, sizes = _membership(parc, a.shape[0])
    block = M.T @ a @ M / np.outer(sizes, sizes)
    block = (block + block.T) / 2
    np.fill_diagonal(block, 1.0)
    return NodeConnectome(block, subject_id)


def _batched_corr(courses):
    xc = courses - courses.mean(axis=2, keepdims=True)
    norm = np.sqrt((xc ** 2).sum(axis=2))
    scale = np.maximum(1.0, np.abs(courses).max(axis=2))
    bad = norm <= 1e-12 * scale
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise ConstantSeries(f"node{k} (subject index {i})")
    z = xc / norm[..., None]
    corr = np.einsum("ikt,ilt->ikl", z, z)
    corr = np.clip((corr + corr.transpose(0, 2, 1)) / 2, -1.0, 1.0)
    idx = np.arange(corr.shape[1])
    corr[:, idx, idx] = 1.0
    return corr


def node_connectomes(cohort, parc, source="auto", indices=None):
    """Node connectomes for the subjects at ``indices`` (default: all), as an
    ``n x K x K`` array.

    source: ``"timeseries"``, ``"matrix"`` or ``"auto"`` (time series when
    every subject has them).
    """
    if source == "auto":
        source = "timeseries" if cohort.has_timeseries else "matrix"
    M, sizes = _membership(parc, cohort.p)
    W = (M / sizes).T
    if source == "timeseries":
        ts = cohort.timeseries_stack()
        if indices is not None:
            ts = ts[indices]
        return _batched_corr(np.matmul(W, ts))
    if source != "matrix":
        raise ValueError(f"unknown connectome source {source!r}")
    stack = cohort.connectivity_stack()
    if indices is not None:
        stack = stack[indices]
    out = np.matmul(np.matmul(W, stack), W.T)
    out = (out + out.transpose(0, 2, 1)) / 2
    idx = np.arange(parc.K)
    out[:, idx, idx] = 1.0
    return out


def compact(parc):
    """Drop empty nodes, renumbering the rest in order."""
    used = np.flatnonzero(parc.sizes())
    if used.size == parc.K:
        return parc
    remap = np.full(parc.K, -1)
    remap[used] = np.arange(used.size)
    return Parcellation(remap[parc.labels], used.size)


# --------------------------------------------------------------------------
# CPM


@dataclass(frozen=True)
class CPMConfig:
    selection_p_threshold: float = 0.01
    predictor: str = "cpm-sum"
    ridge_penalty: float = 1.0

    def __post_init__(self):
        if not 0 < self.selection_p_threshold <= 1:
            raise ValueError("selection_p_threshold must be in (0, 1]")
        if self.predictor not in ("cpm-sum", "ridge"):
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.ridge_penalty < 0:
            raise ValueError("ridge_penalty must be non-negative")


@dataclass
class CPMModel:
    """Fitted CPM.

    ``edge_r`` holds the training correlation of every upper-triangular node
    edge with the outcome; ``coefficients`` holds ``intercept`` plus either
    ``pos``/``neg`` network slopes (cpm-sum) or one slope per selected edge
    (ridge, key ``edges``).
    """

    K: int
    predictor: str
    selected_pos_edges: list
    selected_neg_edges: list
    coefficients: dict
    edge_r: dict = field(default_factory=dict)
    training_summary: dict = field(default_factory=dict)

    @property
    def selected_edges(self):
        return list(self.selected_pos_edges) + list(self.selected_neg_edges)

    def edge_coefficients(self):
        """Per-edge coefficient for every selected edge."""
        if self.predictor == "ridge":
            return dict(zip(map(tuple, self.selected_edges), self.coefficients.get("edges", [])))
        out = {}
        for e in self.selected_pos_edges:
            out[tuple(e)] = self.coefficients.get("pos", 0.0)
        for e in self.selected_neg_edges:
            out[tuple(e)] = self.coefficients.get("neg", 0.0)
        return out

    def _features(self, X_edges):
        pos = [X_edges[:, a, b] for a, b in self.selected_pos_edges]
        neg = [X_edges[:, a, b] for a, b in self.selected_neg_edges]
        return pos, neg

    def predict(self, connectomes):
        C = np.asarray(connectomes, dtype=np.float64)
        if C.ndim == 2:
            C = C[None]
        pred = np.full(C.shape[0], self.coefficients["intercept"], dtype=np.float64)
        if self.predictor == "ridge":
            for (a, b), beta in zip(self.selected_edges, self.coefficients.get("edges", [])):
                pred += beta * C[:, a, b]
            return pred
        pos, neg = self._features(C)
        if pos:
            pred += self.coefficients["pos"] * np.sum(pos, axis=0)
        if neg:
            pred += self.coefficients["neg"] * np.sum(neg, axis=0)
        return pred

    def to_dict(self):
        d = asdict(self)
        d["selected_pos_edges"] = [list(map(int, e)) for e in self.selected_pos_edges]
        d["selected_neg_edges"] = [list(map(int, e)) for e in self.selected_neg_edges]
        d["edge_r"] = [[int(a), int(b), float(r)] for (a, b), r in self.edge_r.items()]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["selected_pos_edges"] = [tuple(e) for e in d["selected_pos_edges"]]
        d["selected_neg_edges"] = [tuple(e) for e in d["selected_neg_edges"]]
        d["edge_r"] = {(int(a), int(b)): float(r) for a, b, r in d.get("edge_r", [])}
        return cls(**d)


def cpm_fit(connectomes, outcomes, config=CPMConfig()):
    """Fit a connectome-based predictive model.

    Each upper-triangular edge is tested for correlation with the outcome
    (two-sided Pearson t-test); edges with p below the threshold are kept
    and split by sign. ``cpm-sum`` regresses the outcome on the summed
    positive and summed negative edge strengths; ``ridge`` regresses on the
    selected edges jointly. When nothing is selected the model predicts the
    training mean and ``training_summary["intercept_only"]`` is set.
    """
    C = np.asarray(connectomes, dtype=np.float64)
    y = np.asarray(outcomes, dtype=np.float64)
    n, K, _ = C.shape
    if n < 3:
        raise TooFewSubjects(f"CPM needs at least 3 training subjects, got {n}")
    if np.ptp(y) == 0:
        raise DegenerateOutcome("training outcomes are constant")
    iu = np.triu_indices(K, 1)
    X = C[:, iu[0], iu[1]]
    r, const = pearson_with_outcome(X, y)
    pval = correlation_pvalue(r, n)
    pval[const] = 1.0
    keep = pval < config.selection_p_threshold
    edges = list(zip(iu[0].tolist(), iu[1].tolist()))
    pos = [edges[i] for i in np.flatnonzero(keep & (r > 0))]
    neg = [edges[i] for i in np.flatnonzero(keep & (r < 0))]
    edge_r = {e: float(v) for e, v in zip(edges, r)}
    summary = {"n_train": int(n), "n_selected": len(pos) + len(neg), "intercept_only": False}

    if not pos and not neg:
        warnings.warn("no edge passed the selection threshold; using intercept-only model",
                      NoEdgesSelected, stacklevel=2)
        summary.update(intercept_only=True, fit_r2=0.0)
        return CPMModel(K, config.predictor, [], [], {"intercept": float(y.mean())}, edge_r, summary)

    if config.predictor == "ridge":
        sel = np.flatnonzero(keep)
        Z = X[:, sel]
        zm = Z.mean(axis=0)
        Zc = Z - zm
        beta = np.linalg.solve(Zc.T @ Zc + config.ridge_penalty * np.eye(len(sel)), Zc.T @ (y - y.mean()))
        order = [edges[i] for i in sel]
        # store coefficients in the pos-then-neg order used by selected_edges
        coef_of = dict(zip(order, beta))
        coefs = {"intercept": float(y.mean() - zm @ beta),
                 "edges": [float(coef_of[e]) for e in pos + neg]}
    else:
        cols = [np.ones(n)]
        if pos:
            cols.append(X[:, [edges.index(e) for e in pos]].sum(axis=1))
        if neg:
            cols.append(X[:, [edges.index(e) for e in neg]].sum(axis=1))
        design = np.column_stack(cols)
        beta = np.linalg.lstsq(design, y, rcond=None)[0]
        coefs = {"intercept": float(beta[0])}
        i = 1
        if pos:
            coefs["pos"] = float(beta[i])
            i += 1
        if neg:
            coefs["neg"] = float(beta[i])
    model = CPMModel(K, config.predictor, pos, neg, coefs, edge_r, summary)
    summary["fit_r2"] = float(r_squared(model.predict(C), y))
    return model


def r_squared(predictions, truth, reference_mean=None):
    """Out-of-sample R^2: ``1 - SS_res / SS_tot``.

    ``SS_tot`` is taken around the test-set mean unless ``reference_mean``
    (e.g. the training mean) is given. Can be negative.
    """
    yhat = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 2:
        raise DimensionMismatch("predictions and truth need equal length >= 2")
    centre = y.mean() if reference_mean is None else float(reference_mean)
    ss_tot = ((y - centre) ** 2).sum()
    if ss_tot == 0 or np.ptp(y) == 0:
        raise DegenerateTruth("truth has zero variance")
    return float(1.0 - ((yhat - y) ** 2).sum() / ss_tot)


def edge_importance_report(model, mode="top-fraction", cutoff=0.2, measure=None):
    """Rank node edges by strength.

    ``top-fraction`` keeps the ``ceil(cutoff * n)`` selected edges with the
    largest |coefficient|; ``abs-threshold`` keeps every edge whose
    |correlation with the outcome| exceeds ``cutoff``. ``measure`` overrides
    the strength used (``"coefficient"`` or ``"correlation"``).
    Rows are dicts ``node_a, node_b, sign, strength``, sorted by |strength|.
    """
    if mode not in ("top-fraction", "abs-threshold"):
        raise ValueError(f"unknown report mode {mode!r}")
    if measure is None:
        measure = "coefficient" if mode == "top-fraction" else "correlation"
    if measure == "coefficient":
        strengths = model.edge_coefficients()
    elif measure == "correlation":
        strengths = dict(model.edge_r) if mode == "abs-threshold" else {
            tuple(e): model.edge_r[tuple(e)] for e in model.selected_edges}
    else:
        raise ValueError(f"unknown measure {measure!r}")
    # ties on |strength| fall back to |correlation|, then edge order
    items = sorted(strengths.items(),
                   key=lambda kv: (-abs(kv[1]), -abs(model.edge_r.get(kv[0], 0.0)), kv[0]))
    if mode == "top-fraction":
        n_keep = int(np.ceil(cutoff * len(items) - 1e-9))
        items = items[:max(n_keep, 0)]
    else:
        items = [kv for kv in items if abs(kv[1]) > cutoff]
    return [{"node_a": int(a), "node_b": int(b), "sign": int(np.sign(v)), "strength": float(v)}
            for (a, b), v in items]


def write_edge_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["node_a", "node_b", "sign", "strength"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "strength": repr(row["strength"])})


# --------------------------------------------------------------------------
# nested cross-validation


@dataclass
class CVReport:
    lambda_grid: list
    per_lambda_validation_r2: dict
    chosen_lambda: float
    chosen_lambda_per_fold: list
    outer_fold_test_r2: list
    mean_test_r2: float
    seed: int
    outer_test_r2_by_lambda: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    folds: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def make_folds(n, folds_outer=10, folds_inner=10, seed=0):
    """Seeded fold assignment; positions index into the cohort's subject list."""
    rng = rng_for(seed, "folds", "outer")
    outer = [np.sort(f).tolist() for f in np.array_split(rng.permutation(n), folds_outer)]
    inner = []
    for f, test in enumerate(outer):
        train = np.setdiff1d(np.arange(n), test)
        irng = rng_for(seed, "folds", "inner", f)
        inner.append([np.sort(train[v]).tolist()
                      for v in np.array_split(irng.permutation(train.size), folds_inner)])
    return {"n": n, "outer": outer, "inner": inner}


def build_group_matrices(train, agg, preference_mode):
    """Group adjacency and preference matrix from the training subjects only."""
    return aggregate_adjacency(train, agg), build_preference_matrix(train, preference_mode)


def fit_parcellations(train, K, lambdas, agg, sbp_config, preference_mode=PreferenceMode.PEARSON,
                      seed=0):
    """One multi-restart SBP fit per lambda, sharing A, R and the embedding."""
    A, R = build_group_matrices(train, agg, preference_mode)
    emb = spectral_embedding(A, K)
    out = {}
    for lam in lambdas:
        cfg = SBPConfig(**{**asdict(sbp_config), "K": K, "lam": float(lam), "seed": seed})
        out[lam] = multi_restart_fit(emb.U, R, cfg).parcellation
    return out


def _score(cohort, train_idx, eval_idx, parc, cpm, source, r2_mean):
    # a node the solver left empty carries no time course; score the rest
    parc = compact(parc)
    train_c = node_connectomes(cohort, parc, source, train_idx)
    eval_c = node_connectomes(cohort, parc, source, eval_idx)
    y = cohort.outcomes
    y_train, y_eval = y[train_idx], y[eval_idx]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoEdgesSelected)
        model = cpm_fit(train_c, y_train, cpm)
    ref = y_train.mean() if r2_mean == "train" else None
    return r_squared(model.predict(eval_c), y_eval, reference_mean=ref)


def _outer_fold(cohort, f, folds, K, grid, agg, cpm, sbp_config, preference_mode, source, r2_mean, seed):
    n = cohort.n
    test = np.asarray(folds["outer"][f])
    train = np.setdiff1d(np.arange(n), test)
    val_r2 = {lam: [] for lam in grid}
    failures = []
    for v, val in enumerate(folds["inner"][f]):
        val = np.asarray(val)
        inner_train = np.setdiff1d(train, val)
        try:
            parcs = fit_parcellations(cohort.subset(inner_train), K, grid, agg, sbp_config,
                                      preference_mode, derive_seed(seed, "sbp", f, v))
            scores = {lam: _score(cohort, inner_train, val, parcs[lam], cpm, source, r2_mean)
                      for lam in grid}
        except SBPError as exc:
            log.warning("outer fold %d, inner fold %d failed: %s", f, v, exc)
            failures.append({"outer": f, "inner": v, "error": f"{type(exc).__name__}: {exc}"})
            continue
        for lam in grid:
            val_r2[lam].append(scores[lam])
    means = {lam: float(np.mean(v)) if v else -np.inf for lam, v in val_r2.items()}
    chosen = max(grid, key=lambda lam: (means[lam], -grid.index(lam)))
    parcs = fit_parcellations(cohort.subset(train), K, grid, agg, sbp_config, preference_mode,
                              derive_seed(seed, "sbp", f, "refit"))
    test_by_lam = {lam: _score(cohort, train, test, parcs[lam], cpm, source, r2_mean) for lam in grid}
    return {"val_r2": val_r2, "chosen": chosen, "test_by_lambda": test_by_lam, "failures": failures}


def tune_lambda(cohort, K, lambda_grid=DEFAULT_LAMBDA_GRID, agg=AggregationMethod.MEAN_SQUARED,
                cpm=CPMConfig(), folds_outer=10, folds_inner=10, seed=0, sbp_config=None,
                preference_mode=PreferenceMode.PEARSON, connectome_source="auto",
                r2_mean="test", folds=None, n_jobs=1):
    """Nested cross-validation for lambda.

    For each outer fold, the remaining subjects are split into inner folds.
    For each lambda and inner split, SBP is fitted on the inner-training
    subjects (A and R built from them alone), node connectomes are formed for
    the inner-training and validation subjects, CPM is trained on the former
    and scored on the latter. The lambda with the best mean validation R^2 is
    refitted on the whole outer-training set and scored on the outer test
    fold. Every lambda's outer test score is also kept, for comparison.

    ``folds`` replays a stored assignment (as produced by ``make_folds``).
    """
    grid = [float(x) for x in lambda_grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    if folds is None:
        if cohort.n < 2 * folds_outer:
            raise TooFewSubjects(f"need at least {2 * folds_outer} subjects for {folds_outer} outer folds")
        folds = make_folds(cohort.n, folds_outer, folds_inner, seed)
    elif folds["n"] != cohort.n:
        raise DimensionMismatch(f"fold file is for n={folds['n']}, cohort has {cohort.n}")
    if sbp_config is None:
        sbp_config = SBPConfig(K=K)
    args = (folds, K, grid, agg, cpm, sbp_config, preference_mode, connectome_source, r2_mean, seed)
    n_outer = len(folds["outer"])
    if n_jobs == 1:
        results = [_outer_fold(cohort, f, *args) for f in range(n_outer)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_outer_fold)(cohort, f, *args) for f in range(n_outer))

    chosen = [r["chosen"] for r in results]
    test_r2 = [r["test_by_lambda"][lam] for r, lam in zip(results, chosen)]
    counts = {lam: chosen.count(lam) for lam in grid}
    modal = max(grid, key=lambda lam: (counts[lam], -grid.index(lam)))
    per_lambda = {}
    for lam in grid:
        folds_vals = [r["val_r2"][lam] for r in results]
        flat = [x for vals in folds_vals for x in vals]
        per_lambda[repr(lam)] = {"mean": float(np.mean(flat)) if flat else None, "per_fold": folds_vals}
    by_lambda = {repr(lam): [r["test_by_lambda"][lam] for r in results] for lam in grid}
    return CVReport(
        lambda_grid=grid,
        per_lambda_validation_r2=per_lambda,
        chosen_lambda=modal,
        chosen_lambda_per_fold=chosen,
        outer_fold_test_r2=test_r2,
        mean_test_r2=float(np.mean(test_r2)),
        seed=seed,
        outer_test_r2_by_lambda=by_lambda,
        failures=[f for r in results for f in r["failures"]],
        folds=folds,
    )
