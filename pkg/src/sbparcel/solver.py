"""Regularized Lloyd coordinate descent for supervised parcellation.

The objective over a partition ``{C_k}`` of the rows of an embedding ``U`` is

    sum_k ( sum_{j in C_k} ||U_j - mu_k||^2 + lam * sum_{j != l in C_k} r_jl )

with ``mu_k`` the mean of the rows in ``C_k`` and the penalty summed over
ordered pairs. Each sweep visits voxels in index order with the centroids
held fixed, moves every voxel to the node that lowers the objective most,
then recenters. Moving voxel ``j`` from node ``a`` to node ``b`` changes the
ordered-pair penalty by ``2 * (S[j, b] - S[j, a])`` where
``S[j, k] = sum_{l in C_k, l != j} r_jl``, so sweeps use ``2 * lam`` as the
weight on ``S``; with that weight each accepted move, and the recentering
after it, can only lower the objective.
"""
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, InvalidLabels
from .parcellation import Parcellation
from .seeding import derive_seed
from .spectral import as_matrix, kmeans_init

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SBPConfig:
    K: int
    lam: float = 0.0
    max_iter: int = 100
    tol: float = 1e-5
    n_restarts: int = 10
    seed: int = 0
    # "sweep": centroids recomputed after each full pass; "move": after every reassignment
    centroid_update: str = "sweep"
    # "objective": |delta objective| < tol; "centroids": max centroid shift < tol
    convergence: str = "objective"
    record_labels: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.max_iter < 1 or self.n_restarts < 1:
            raise ValueError("max_iter and n_restarts must be positive")
        if self.centroid_update not in ("sweep", "move"):
            raise ValueError(f"unknown centroid_update {self.centroid_update!r}")
        if self.convergence not in ("objective", "centroids"):
            raise ValueError(f"unknown convergence test {self.convergence!r}")


@dataclass
class FitResult:
    parcellation: Parcellation
    centroids: np.ndarray
    objective: float
    objective_trace: list
    n_iter: int
    converged: bool
    restart_index: int = 0
    label_trace: list = field(default=None, repr=False)

    @property
    def labels(self):
        return self.parcellation.labels

    def summary(self, config=None):
        out = {
            "objective": self.objective,
            "objective_trace": list(self.objective_trace),
            "n_iter": self.n_iter,
            "converged": self.converged,
            "restart_index": self.restart_index,
            "K": self.parcellation.K,
            "node_sizes": self.parcellation.sizes().tolist(),
        }
        if config is not None:
            out["config"] = asdict(config)
        return out


def _check(U, R, labels):
    U = as_matrix(U)
    R = as_matrix(R)
    p = U.shape[0]
    if R.shape != (p, p):
        raise DimensionMismatch(f"R has shape {R.shape}, expected {(p, p)}")
    if labels is not None and len(labels) != p:
        raise DimensionMismatch(f"{len(labels)} labels for {p} voxels")
    R0 = np.array(R, dtype=np.float64)
    np.fill_diagonal(R0, 0.0)
    return U, R0


def _labels_of(labels):
    if isinstance(labels, Parcellation):
        return labels.labels, labels.K
    lab = np.asarray(labels, dtype=np.int64)
    return lab, int(lab.max()) + 1 if lab.size else 0


def _objective(U, R0, labels, lam):
    # node sums accumulate in voxel order and the total is a per-voxel sum,
    # so the value is exactly invariant to relabeling the nodes
    K = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=K)
    sums = np.zeros((K, U.shape[1]))
    np.add.at(sums, labels, U)
    per_voxel = ((U - sums[labels] / counts[labels, None]) ** 2).sum(axis=1)
    if lam:
        same = labels[:, None] == labels[None, :]
        per_voxel = per_voxel + lam * np.where(same, R0, 0.0).sum(axis=1)
    return float(per_voxel.sum())


def objective(U, R, labels, lam):
    """Within-node scatter of the rows of ``U`` plus ``lam`` times the
    ordered-pair preference sum inside each node (diagonal excluded)."""
    lab, _ = _labels_of(labels)
    U, R0 = _check(U, R, lab)
    return _objective(U, R0, lab, float(lam))


def centroids_from_labels(U, labels, K, previous=None):
    """Node means; an empty node keeps its ``previous`` centroid (NaN if none)."""
    U = as_matrix(U)
    mu = np.full((K, U.shape[1]), np.nan) if previous is None else np.array(previous, dtype=np.float64)
    counts = np.bincount(labels, minlength=K)
    sums = np.zeros((K, U.shape[1]))
    np.add.at(sums, labels, U)
    nz = counts > 0
    mu[nz] = sums[nz] / counts[nz, None]
    return mu


def assignment_loss(j, k, U, centroids, R, labels, lam):
    """Loss for placing voxel ``j`` in node ``k``:
    ``-2 U_j . mu_k + ||mu_k||^2 + lam * sum_{l in C_k, l != j} r_jl``.
    """
    lab, _ = _labels_of(labels)
    U, R0 = _check(U, R, lab)
    mu = np.asarray(centroids, dtype=np.float64)
    if not 0 <= j < U.shape[0]:
        raise IndexOutOfRange(f"voxel {j} out of range")
    if not 0 <= k < mu.shape[0]:
        raise IndexOutOfRange(f"node {k} out of range")
    pen = R0[j, lab == k].sum()
    return float(-2.0 * U[j] @ mu[k] + mu[k] @ mu[k] + lam * pen)


def _sqdist(U, mu):
    d = ((U[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    d[np.isnan(d)] = np.inf
    return d


def _sweep(U, R0, lam, labels, mu, S, per_move):
    """One Gauss-Seidel pass over voxels; mutates labels, S (and mu if per_move).

    Voxels ahead of the next mover see the same centroids and the same S,
    so the pass jumps straight from one mover to the next.
    """
    p = U.shape[0]
    w = 2.0 * lam
    D = _sqdist(U, mu)
    if not w and not per_move:
        # no coupling between voxels: the pass is a plain Lloyd assignment
        new = np.argmin(D, axis=1)
        moved = np.flatnonzero(new != labels)
        if moved.size:
            labels[:] = new
            S[:] = R0 @ Parcellation(labels, mu.shape[0]).one_hot()
        return moved.size
    counts = np.bincount(labels, minlength=mu.shape[0])
    moves = 0
    j = 0
    while j < p:
        L = D[j:] + w * S[j:] if w else D[j:]
        best = np.argmin(L, axis=1)
        movers = np.flatnonzero(best != labels[j:])
        if movers.size == 0:
            break
        i = j + int(movers[0])
        a, b = labels[i], int(best[movers[0]])
        labels[i] = b
        counts[a] -= 1
        counts[b] += 1
        col = R0[:, i]
        S[:, a] -= col
        S[:, b] += col
        if per_move:
            for k in (a, b):
                if counts[k]:
                    mu[k] = U[labels == k].mean(axis=0)
                    D[:, k] = ((U - mu[k]) ** 2).sum(axis=1)
        moves += 1
        j = i + 1
    return moves


def _reseed_empty(U, R0, lam, labels, mu, S, current):
    """Give each empty node the voxel contributing most to the objective,
    provided the move does not raise the objective."""
    K = mu.shape[0]
    p = U.shape[0]
    for k in range(K):
        counts = np.bincount(labels, minlength=K)
        if counts[k]:
            continue
        contrib = ((U - mu[labels]) ** 2).sum(axis=1) + 2.0 * lam * S[np.arange(p), labels]
        contrib[counts[labels] < 2] = -np.inf
        if not np.isfinite(contrib).any():
            break
        j = int(np.argmax(contrib))
        a = labels[j]
        labels[j] = k
        trial = _objective(U, R0, labels, lam)
        if trial > current:
            labels[j] = a
            log.debug("node %d left empty: reseeding would raise the objective", k)
            continue
        current = trial
        S[:, a] -= R0[:, j]
        S[:, k] += R0[:, j]
        mu[k] = U[j]
        mu[a] = U[labels == a].mean(axis=0)
    return current


def sbp_fit(U, R, config, init, restart_index=0):
    """Run coordinate-descent sweeps from ``init`` until the objective
    change drops below ``config.tol`` or ``config.max_iter`` sweeps ran."""
    lab0, _ = _labels_of(init)
    U, R0 = _check(U, R, lab0)
    K = config.K
    if isinstance(init, Parcellation) and init.K != K:
        raise InvalidLabels(f"init has K={init.K}, config has K={K}")
    if lab0.size and (lab0.min() < 0 or lab0.max() >= K):
        raise InvalidLabels(f"init labels must lie in [0, {K})")
    lam = float(config.lam)
    labels = lab0.copy()
    mu = centroids_from_labels(U, labels, K)
    S = R0 @ Parcellation(labels, K).one_hot()
    current = _objective(U, R0, labels, lam)
    current = _reseed_empty(U, R0, lam, labels, mu, S, current)

    trace = []
    label_trace = [labels.copy()] if config.record_labels else None
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        old_mu = mu.copy()
        _sweep(U, R0, lam, labels, mu, S, config.centroid_update == "move")
        mu = centroids_from_labels(U, labels, K, previous=mu)
        obj = _objective(U, R0, labels, lam)
        obj = _reseed_empty(U, R0, lam, labels, mu, S, obj)
        trace.append(obj)
        if label_trace is not None:
            label_trace.append(labels.copy())
        if config.convergence == "objective":
            converged = abs(obj - current) < config.tol
        else:
            shift = np.nan_to_num(np.abs(mu - old_mu), nan=0.0)
            converged = float(shift.max(initial=0.0)) < config.tol
        current = obj
        if converged:
            break
    return FitResult(
        parcellation=Parcellation(labels, K),
        centroids=mu,
        objective=_objective(U, R0, labels, lam),
        objective_trace=trace,
        n_iter=n_iter,
        converged=converged,
        restart_index=restart_index,
        label_trace=label_trace,
    )


def restart_init(U, config, r):
    seed = derive_seed(config.seed, "restart", r)
    strategy = "kmeans-lloyd" if r == 0 else "random-assignment"
    return kmeans_init(U, config.K, strategy=strategy, seed=seed, tol=config.tol)


def _one_restart(U, R, config, r):
    return sbp_fit(U, R, config, restart_init(U, config, r), restart_index=r)


def multi_restart_fit(U, R, config):
    """Best of ``config.n_restarts`` fits.

    Restart 0 starts from k-means on the rows of ``U``; the others from
    random assignments. Each restart's seed is derived from ``config.seed``
    and its index, so the result does not depend on scheduling. Ties on the
    objective go to the lowest restart index.
    """
    U = as_matrix(U)
    R = as_matrix(R)
    if config.n_jobs == 1:
        results = [_one_restart(U, R, config, r) for r in range(config.n_restarts)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_one_restart)(U, R, config, r) for r in range(config.n_restarts))
    best = results[0]
    for res in results[1:]:
        if res.objective < best.objective:
            best = res
    return best
