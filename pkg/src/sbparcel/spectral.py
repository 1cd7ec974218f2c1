"""Spectral embedding of the group adjacency and k-means initialization."""
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.sparse import linalg as sparse_linalg

from .errors import ConvergenceFailure, InvalidLabels, KOutOfRange
from .parcellation import Parcellation

SIGN_EPS = 1e-10


@dataclass(frozen=True)
class SpectralEmbedding:
    """Top-K eigenvectors (columns of ``U``) ranked by absolute eigenvalue."""

    U: np.ndarray
    eigenvalues: np.ndarray

    @property
    def p(self):
        return self.U.shape[0]

    @property
    def K(self):
        return self.U.shape[1]


def as_matrix(obj):
    """Unwrap GroupAdjacency / PreferenceMatrix / SpectralEmbedding to an ndarray."""
    if isinstance(obj, SpectralEmbedding):
        return obj.U
    return np.asarray(getattr(obj, "matrix", obj), dtype=np.float64)


def _fix_signs(vecs):
    for k in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, k]) > SIGN_EPS)
        if nz.size and vecs[nz[0], k] < 0:
            vecs[:, k] = -vecs[:, k]
    return vecs


def spectral_embedding(A, K, solver="dense", residual_tol=1e-6):
    """Leading ``K`` eigenpairs of ``A`` by absolute eigenvalue.

    ``solver="dense"`` runs a full symmetric eigendecomposition;
    ``solver="iterative"`` uses ARPACK (Lanczos) with a fixed starting
    vector, for large ``p``. Each eigenvector is signed so that its first
    entry with magnitude above 1e-10 is positive.
    """
    a = as_matrix(A)
    p = a.shape[0]
    if a.ndim != 2 or a.shape[1] != p:
        raise ValueError("A must be square")
    if not 1 <= K <= p:
        raise KOutOfRange(f"K={K} outside [1, {p}]")
    a = (a + a.T) / 2
    if solver == "dense" or K >= p - 1:
        w, v = linalg.eigh(a)
    elif solver == "iterative":
        try:
            w, v = sparse_linalg.eigsh(a, k=K, which="LM", v0=np.ones(p) / np.sqrt(p), tol=0)
        except sparse_linalg.ArpackNoConvergence as exc:
            raise ConvergenceFailure(f"ARPACK did not converge: {exc}") from None
    else:
        raise ValueError(f"unknown solver {solver!r}")
    # stable sort keeps the solver's order among |eigenvalue| ties
    order = np.argsort(-np.abs(w), kind="stable")[:K]
    w = w[order]
    U = _fix_signs(np.array(v[:, order]))
    scale = max(np.linalg.norm(a), 1.0)
    resid = np.linalg.norm(a @ U - U * w, axis=0)
    if resid.max() > residual_tol * scale:
        raise ConvergenceFailure(f"eigen residuals too large: {resid}")
    return SpectralEmbedding(U, w)


def kmeans_pp_centers(X, K, rng):
    """k-means++ seeding: D^2-weighted sampling of ``K`` rows of ``X``."""
    p = X.shape[0]
    chosen = [int(rng.integers(p))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(p), chosen)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(p, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def lloyd(X, centers, max_iter=100, tol=1e-5):
    """Plain Lloyd iterations; stops when the within-cluster SS changes by < tol.

    An empty cluster is reseeded with the point farthest from its centroid.
    """
    centers = np.array(centers, dtype=np.float64)
    K = centers.shape[0]
    prev = np.inf
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        for k in range(K):
            members = labels == k
            if members.any():
                centers[k] = X[members].mean(axis=0)
        for k in range(K):
            if not (labels == k).any():
                own = ((X - centers[labels]) ** 2).sum(axis=1)
                sizes = np.bincount(labels, minlength=K)
                own[sizes[labels] < 2] = -np.inf
                j = int(np.argmax(own))
                old = labels[j]
                labels[j] = k
                centers[k] = X[j]
                centers[old] = X[labels == old].mean(axis=0)
        sse = ((X - centers[labels]) ** 2).sum()
        if abs(prev - sse) < tol:
            break
        prev = sse
    return labels


def kmeans_init(emb, K, strategy="kmeans-lloyd", seed=0, labels=None, max_iter=100, tol=1e-5):
    """Initial parcellation for the solver.

    strategy:
        ``"kmeans-lloyd"``: k-means++ seeding, then Lloyd on the rows of U.
        ``"random-assignment"``: every node gets one random voxel, the
        rest are assigned uniformly at random.
        ``"provided-labels"``: validate and wrap ``labels``.
    """
    X = as_matrix(emb)
    p = X.shape[0]
    if not 1 <= K <= p:
        raise KOutOfRange(f"K={K} outside [1, {p}]")
    rng = np.random.default_rng(seed)
    if strategy == "provided-labels":
        if labels is None:
            raise InvalidLabels("provided-labels strategy needs labels")
        lab = np.asarray(labels)
        if lab.shape != (p,) or not np.issubdtype(lab.dtype, np.integer):
            raise InvalidLabels(f"labels must be {p} integers")
        if lab.min() < 0 or lab.max() >= K:
            raise InvalidLabels(f"labels must lie in [0, {K})")
        return Parcellation(lab, K)
    if strategy == "random-assignment":
        lab = rng.integers(K, size=p)
        lab[rng.permutation(p)[:K]] = np.arange(K)
        return Parcellation(lab, K)
    if strategy != "kmeans-lloyd":
        raise ValueError(f"unknown init strategy {strategy!r}")
    if K == p:
        return Parcellation(np.arange(p), K)
    centers = kmeans_pp_centers(X, K, rng)
    return Parcellation(lloyd(X, centers, max_iter=max_iter, tol=tol), K)
