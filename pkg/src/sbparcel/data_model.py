"""Cohort containers and the two group-level matrices that drive the solver.

A cohort holds one voxel-level connectivity matrix (and optionally the raw
voxel time courses) plus a scalar outcome per subject. From it we build

* the group adjacency ``A``, an average of the subject matrices, and
* the preference matrix ``R``, whose entry ``(j, l)`` measures how strongly
  edge ``(j, l)`` tracks the outcome across subjects.
"""
import csv
import enum
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import stats

from . import matrix_io
from .errors import (
    ConstantSeries,
    DegenerateOutcome,
    DimensionMismatch,
    EmptyCohort,
    InconsistentVoxelSet,
    MissingOutcome,
    ParseError,
    SBPError,
    TooFewSubjects,
)

log = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
DEFAULT_INV_P_CAP = 1e6


class NonFiniteData(InconsistentVoxelSet):
    """Non-finite voxel data found while the manifest policy is ``abort``."""


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _is_constant(centered, values, axis):
    scale = np.maximum(1.0, np.abs(values).max(axis=axis))
    return np.sqrt((centered ** 2).sum(axis=axis)) <= 1e-12 * scale


@dataclass(frozen=True)
class VoxelTimeSeries:
    values: np.ndarray
    voxel_ids: tuple = None

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise DimensionMismatch("time series must be a p x T matrix")
        object.__setattr__(self, "values", values)
        ids = self.voxel_ids
        if ids is None:
            ids = tuple(f"v{j}" for j in range(values.shape[0]))
        elif len(ids) != values.shape[0]:
            raise DimensionMismatch(f"{len(ids)} voxel ids for {values.shape[0]} rows")
        object.__setattr__(self, "voxel_ids", tuple(ids))

    @property
    def p(self):
        return self.values.shape[0]

    @property
    def n_timepoints(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    connectivity: np.ndarray
    outcome: float
    timeseries: VoxelTimeSeries = None

    def __post_init__(self):
        conn = _frozen(self.connectivity)
        if conn.ndim != 2 or conn.shape[0] != conn.shape[1]:
            raise DimensionMismatch(f"subject {self.id}: connectivity must be square")
        if not np.allclose(conn, conn.T, rtol=0, atol=SYMMETRY_TOL):
            raise SBPError(f"subject {self.id}: connectivity is not symmetric")
        off = conn[~np.eye(conn.shape[0], dtype=bool)]
        if off.size and (off.min() < -1 - 1e-12 or off.max() > 1 + 1e-12):
            raise SBPError(f"subject {self.id}: off-diagonal entries outside [-1, 1]")
        object.__setattr__(self, "connectivity", conn)
        object.__setattr__(self, "outcome", float(self.outcome))
        if self.timeseries is not None and self.timeseries.p != conn.shape[0]:
            raise DimensionMismatch(f"subject {self.id}: time series and matrix disagree on p")

    @property
    def p(self):
        return self.connectivity.shape[0]


@dataclass(frozen=True)
class Cohort:
    subjects: tuple
    voxel_ids: tuple = None
    voxel_meta: dict = None

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        if subjects:
            p = subjects[0].p
            for s in subjects:
                if s.p != p:
                    raise DimensionMismatch(f"subject {s.id} has p={s.p}, expected {p}")
        else:
            p = len(self.voxel_ids or ())
        ids = self.voxel_ids
        if ids is None:
            ids = tuple(f"v{j}" for j in range(p))
        elif len(ids) != p:
            raise InconsistentVoxelSet(f"{len(ids)} voxel ids for p={p}")
        object.__setattr__(self, "voxel_ids", tuple(ids))

    @property
    def n(self):
        return len(self.subjects)

    @property
    def p(self):
        return len(self.voxel_ids)

    @property
    def ids(self):
        return [s.id for s in self.subjects]

    @property
    def outcomes(self):
        return np.array([s.outcome for s in self.subjects], dtype=np.float64)

    @property
    def has_timeseries(self):
        return bool(self.subjects) and all(s.timeseries is not None for s in self.subjects)

    def connectivity_stack(self):
        """Subject matrices stacked into an ``n x p x p`` array."""
        return self._connectivity_array

    def timeseries_stack(self):
        """Voxel time series stacked into an ``n x p x T`` array."""
        return self._timeseries_array

    @cached_property
    def _connectivity_array(self):
        a = np.stack([s.connectivity for s in self.subjects])
        a.setflags(write=False)
        return a

    @cached_property
    def _timeseries_array(self):
        a = np.stack([s.timeseries.values for s in self.subjects])
        a.setflags(write=False)
        return a

    def subset(self, indices):
        return Cohort(tuple(self.subjects[i] for i in indices), self.voxel_ids, self.voxel_meta)

    def group_tags(self):
        if self.voxel_meta and "group_tag" in self.voxel_meta:
            return list(self.voxel_meta["group_tag"])
        return None


class AggregationMethod(enum.Enum):
    """How subject matrices are pooled into the group adjacency."""

    MEAN_SQUARED = "mean-squared"
    MEAN = "mean"
    MEAN_SQUARED_DEBIASED = "mean-squared-debiased"
    # degree matrix taken from the squared matrix instead of A itself
    MEAN_SQUARED_DEBIASED_SQDEG = "mean-squared-debiased-sqdeg"


class PreferenceMode(enum.Enum):
    PEARSON = "pearson"
    INVERSE_PVALUE = "inverse-pvalue"


@dataclass(frozen=True)
class GroupAdjacency:
    matrix: np.ndarray
    method: AggregationMethod = AggregationMethod.MEAN_SQUARED

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))

    @property
    def p(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PreferenceMatrix:
    matrix: np.ndarray
    mode: PreferenceMode = PreferenceMode.PEARSON

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))

    @property
    def p(self):
        return self.matrix.shape[0]


def compute_voxel_connectivity(ts):
    """Pearson correlation between every pair of voxel time courses.

    Raises ConstantSeries naming the first voxel whose course has zero
    variance; the caller decides whether to drop it or abort.
    """
    if not isinstance(ts, VoxelTimeSeries):
        ts = VoxelTimeSeries(ts)
    x = ts.values
    if ts.n_timepoints < 3:
        raise SBPError(f"need at least 3 time points, got {ts.n_timepoints}")
    xc = x - x.mean(axis=1, keepdims=True)
    const = _is_constant(xc, x, axis=1)
    if const.any():
        raise ConstantSeries(ts.voxel_ids[int(np.argmax(const))])
    z = xc / np.sqrt((xc ** 2).sum(axis=1, keepdims=True))
    corr = z @ z.T
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def aggregate_adjacency(cohort, method=AggregationMethod.MEAN_SQUARED):
    """Pool the subject matrices into one group adjacency.

    ``MEAN_SQUARED_DEBIASED`` subtracts, for each subject, the diagonal
    matrix of row sums of that subject's matrix before averaging.
    """
    method = AggregationMethod(method)
    if cohort.n == 0:
        raise EmptyCohort("cannot aggregate an empty cohort")
    p = cohort.p
    acc = np.zeros((p, p))
    degree = np.zeros(p)
    for s in cohort.subjects:
        a = s.connectivity
        if a.shape != (p, p):
            raise DimensionMismatch(f"subject {s.id} has shape {a.shape}, expected {(p, p)}")
        if method is AggregationMethod.MEAN:
            acc += a
        else:
            sq = a * a
            acc += sq
            if method is AggregationMethod.MEAN_SQUARED_DEBIASED:
                degree += a.sum(axis=1)
            elif method is AggregationMethod.MEAN_SQUARED_DEBIASED_SQDEG:
                degree += sq.sum(axis=1)
    acc[np.diag_indices(p)] -= degree
    acc /= cohort.n
    return GroupAdjacency((acc + acc.T) / 2, method)


def pearson_with_outcome(edges, outcome):
    """Column-wise Pearson correlation of ``edges`` (n x m) with ``outcome`` (n).

    Returns ``(r, constant_mask)``; constant columns get ``r = 0``.
    """
    edges = np.asarray(edges, dtype=np.float64)
    y = np.asarray(outcome, dtype=np.float64)
    yc = y - y.mean()
    xc = edges - edges.mean(axis=0)
    const = _is_constant(xc, edges, axis=0)
    sx = np.sqrt((xc ** 2).sum(axis=0))
    sx[const] = 1.0
    r = (yc @ xc) / (sx * np.sqrt(yc @ yc))
    r[const] = 0.0
    return np.clip(r, -1.0, 1.0), const


def correlation_pvalue(r, n):
    """Two-sided p-value of the Pearson t-test with ``n - 2`` degrees of freedom."""
    r = np.asarray(r, dtype=np.float64)
    df = n - 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.abs(r) * np.sqrt(df / np.maximum(1.0 - r * r, 0.0))
    return 2.0 * stats.t.sf(t, df)


def build_preference_matrix(cohort, mode=PreferenceMode.PEARSON, cap=DEFAULT_INV_P_CAP, block=256):
    """Edge-by-edge association between connectivity and outcome.

    Entry ``(j, l)`` is the Pearson correlation across subjects between
    ``a_jl`` and the outcome, or the reciprocal of its two-sided p-value
    (capped at ``cap``). The diagonal and edges that are constant across
    subjects are set to zero.
    """
    mode = PreferenceMode(mode)
    if cohort.n < 3:
        raise TooFewSubjects(f"need at least 3 subjects, got {cohort.n}")
    y = cohort.outcomes
    if np.ptp(y) == 0:
        raise DegenerateOutcome("outcome has zero variance")
    stack = cohort.connectivity_stack()
    n, p, _ = stack.shape
    out = np.zeros((p, p))
    const_mask = np.zeros((p, p), dtype=bool)
    for start in range(0, p, block):
        stop = min(start + block, p)
        rows = stack[:, start:stop, :].reshape(n, -1)
        r, const = pearson_with_outcome(rows, y)
        if mode is PreferenceMode.INVERSE_PVALUE:
            with np.errstate(divide="ignore"):
                vals = np.minimum(1.0 / correlation_pvalue(r, n), cap)
            vals[const] = 0.0
        else:
            vals = r
        out[start:stop] = vals.reshape(stop - start, p)
        const_mask[start:stop] = const.reshape(stop - start, p)
    n_const = int(np.triu(const_mask, k=1).sum())
    upper = np.triu(out, k=1)
    out = upper + upper.T
    if n_const:
        log.warning("%d edges are constant across subjects; preference set to 0", n_const)
    return PreferenceMatrix(out, mode)


# --------------------------------------------------------------------------
# manifest ingestion


def _read_outcomes(path):
    outcomes = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"id", "outcome"} <= set(reader.fieldnames):
                raise ParseError(f"{path}: expected columns id,outcome")
            for row in reader:
                outcomes[row["id"]] = float(row["outcome"])
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    return outcomes


def _read_voxel_meta(path):
    cols = {"voxel_id": [], "x": [], "y": [], "z": [], "group_tag": []}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "voxel_id" not in reader.fieldnames:
                raise ParseError(f"{path}: expected a voxel_id column")
            for row in reader:
                cols["voxel_id"].append(row["voxel_id"])
                for c in ("x", "y", "z"):
                    cols[c].append(float(row[c]) if row.get(c) not in (None, "") else np.nan)
                cols["group_tag"].append(row.get("group_tag") or "")
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    return cols


def _bad_voxels(matrix, ts):
    # a bad voxel's column pollutes every row, so peel off the worst voxel
    # until the remaining block is finite
    nonfinite = ~np.isfinite(matrix)
    nonfinite = nonfinite | nonfinite.T
    bad = np.zeros(matrix.shape[0], dtype=bool)
    while True:
        counts = (nonfinite & ~bad[None, :]).sum(axis=1)
        counts[bad] = 0
        if not counts.any():
            break
        bad[int(np.argmax(counts))] = True
    if ts is not None:
        finite = np.isfinite(ts).all(axis=1)
        bad |= ~finite
        safe = np.where(finite[:, None], ts, 0.0)
        bad |= _is_constant(safe - safe.mean(axis=1, keepdims=True), safe, axis=1)
    return bad


def load_cohort(manifest_path):
    """Load and validate a cohort described by a JSON manifest.

    Manifest keys: ``subjects`` (list of ``{id, matrix_file}`` or
    ``{id, timeseries_file}``), ``outcomes`` (CSV with ``id,outcome``),
    optional ``voxel_meta`` (CSV with ``voxel_id,x,y,z,group_tag``) and
    ``missing_policy`` (``"abort"``, the default, or ``"drop-voxel"``).
    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{manifest_path}: {exc}") from None
    root = manifest_path.parent
    try:
        entries = manifest["subjects"]
        outcomes = _read_outcomes(root / manifest["outcomes"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{manifest_path}: missing key {exc}") from None
    policy = manifest.get("missing_policy", "abort")
    if policy not in ("abort", "drop-voxel"):
        raise ParseError(f"unknown missing_policy {policy!r}")

    raw = []
    for entry in entries:
        sid = str(entry.get("id", ""))
        if not sid:
            raise ParseError("subject entry without id")
        if sid not in outcomes:
            raise MissingOutcome(sid)
        if "matrix_file" in entry:
            matrix, ts = matrix_io.read_matrix(root / entry["matrix_file"]), None
        elif "timeseries_file" in entry:
            ts = matrix_io.read_matrix(root / entry["timeseries_file"])
            matrix = None
        else:
            raise ParseError(f"subject {sid}: needs matrix_file or timeseries_file")
        raw.append((sid, matrix, ts))
    if not raw:
        raise ParseError(f"{manifest_path}: no subjects")

    sizes = {(m if m is not None else t).shape[0] for _, m, t in raw}
    if len(sizes) != 1:
        raise InconsistentVoxelSet(f"subjects disagree on voxel count: {sorted(sizes)}")
    p = sizes.pop()
    for sid, m, _ in raw:
        if m is not None and m.shape != (p, p):
            raise InconsistentVoxelSet(f"subject {sid}: matrix shape {m.shape}")

    meta = None
    voxel_ids = [f"v{j}" for j in range(p)]
    if manifest.get("voxel_meta"):
        meta = _read_voxel_meta(root / manifest["voxel_meta"])
        if len(meta["voxel_id"]) != p:
            raise InconsistentVoxelSet(f"voxel metadata has {len(meta['voxel_id'])} rows for p={p}")
        voxel_ids = list(meta["voxel_id"])

    bad = np.zeros(p, dtype=bool)
    for sid, m, t in raw:
        bad |= _bad_voxels(m if m is not None else np.zeros((p, p)), t)
    if bad.any():
        dropped = [voxel_ids[j] for j in np.flatnonzero(bad)]
        if policy == "abort":
            raise NonFiniteData(f"non-finite or constant data in voxels {dropped}")
        log.warning("dropping %d voxels with incomplete data: %s", len(dropped), dropped)
    keep = np.flatnonzero(~bad)
    voxel_ids = [voxel_ids[j] for j in keep]
    if meta is not None:
        meta = {k: [v[j] for j in keep] for k, v in meta.items()}

    subjects = []
    for sid, m, t in raw:
        if t is not None:
            vts = VoxelTimeSeries(t[keep], voxel_ids)
            conn = compute_voxel_connectivity(vts)
        else:
            vts = None
            conn = m[np.ix_(keep, keep)]
        subjects.append(SubjectRecord(sid, conn, outcomes[sid], vts))
    return Cohort(tuple(subjects), tuple(voxel_ids), meta)


def write_cohort(cohort, out_dir, matrix_format="binary"):
    """Write ``cohort`` in manifest form; returns the manifest path.

    Subjects carrying time series are written as time-series files, the
    rest as connectivity matrices.
    """
    out_dir = Path(out_dir)
    (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
    ext = ".csv" if matrix_format == "csv" else ".sbpm"
    entries = []
    for s in cohort.subjects:
        if s.timeseries is not None:
            rel = f"subjects/{s.id}_ts{ext}"
            matrix_io.write_matrix(out_dir / rel, s.timeseries.values)
            entries.append({"id": s.id, "timeseries_file": rel})
        else:
            rel = f"subjects/{s.id}{ext}"
            matrix_io.write_matrix(out_dir / rel, s.connectivity)
            entries.append({"id": s.id, "matrix_file": rel})
    with open(out_dir / "outcomes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "outcome"])
        for s in cohort.subjects:
            w.writerow([s.id, repr(s.outcome)])
    manifest = {"subjects": entries, "outcomes": "outcomes.csv", "missing_policy": "abort"}
    meta = cohort.voxel_meta or {}
    with open(out_dir / "voxels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_id", "x", "y", "z", "group_tag"])
        for j, vid in enumerate(cohort.voxel_ids):
            row = [vid]
            for c in ("x", "y", "z"):
                vals = meta.get(c)
                row.append("" if vals is None or np.isnan(vals[j]) else repr(float(vals[j])))
            tags = meta.get("group_tag")
            row.append(tags[j] if tags is not None else "")
            w.writerow(row)
    manifest["voxel_meta"] = "voxels.csv"
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
