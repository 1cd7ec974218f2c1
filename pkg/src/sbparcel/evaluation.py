"""Dice overlap, cross-run node matching and subsample reproducibility."""
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_model import AggregationMethod, PreferenceMode
from .errors import EmptySet, SBPError, TooFewSubjects, VoxelUniverseMismatch
from .parcellation import Parcellation
from .prediction import fit_parcellations
from .seeding import derive_seed, rng_for
from .solver import SBPConfig

log = logging.getLogger(__name__)


def dice(c1, c2):
    """``2 |C1 & C2| / (|C1| + |C2|)`` for two voxel index sets."""
    a, b = set(c1), set(c2)
    if not a or not b:
        raise EmptySet("Dice needs two non-empty sets")
    return 2.0 * len(a & b) / (len(a) + len(b))


def _dice_matrix(ref, other):
    # overlap[k, m] = |C_k (ref) & C_m (other)|
    overlap = np.zeros((ref.K, other.K))
    np.add.at(overlap, (ref.labels, other.labels), 1.0)
    sizes = ref.sizes()[:, None] + other.sizes()[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(sizes > 0, 2.0 * overlap / sizes, 0.0)


def match_nodes(reference, other):
    """For every reference node, the node of ``other`` with the highest Dice.

    Matching is independent per node (several reference nodes may share a
    match); ties go to the lower node index. Returns ``(matches, best)``
    arrays of length ``reference.K``; empty reference nodes get match -1
    and Dice NaN.
    """
    if reference.p != other.p:
        raise VoxelUniverseMismatch(f"{reference.p} vs {other.p} voxels")
    D = _dice_matrix(reference, other)
    D[:, other.sizes() == 0] = -1.0
    matches = np.argmax(D, axis=1)
    best = D[np.arange(reference.K), matches]
    empty = reference.sizes() == 0
    matches[empty] = -1
    best[empty] = np.nan
    return matches, best


@dataclass
class DiceReport:
    per_node_mean_dice: list
    weighted_mean_dice: float
    node_size_summary: list
    n_samples: int
    subsample_fraction: float
    reference_sample: int = 0
    per_group_mean_dice: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    subsamples: list = field(default_factory=list, repr=False)
    parcellations: list = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("parcellations")
        d["per_node_mean_dice"] = [None if np.isnan(x) else x for x in self.per_node_mean_dice]
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _size_summary(parc, tags):
    sizes = parc.sizes()
    out = {"all": sizes.tolist()}
    if tags is not None:
        tags = np.asarray(tags)
        for tag in sorted(set(tags.tolist())):
            mask = tags == tag
            out[str(tag)] = np.bincount(parc.labels[mask], minlength=parc.K).tolist()
    return out


def summarize_reproducibility(parcs, reference=0, tags=None):
    """Per-node mean best-match Dice of ``parcs[reference]`` against the rest,
    and the size-weighted mean (weights ``|C_k| / p``)."""
    ref = parcs[reference]
    others = [q for i, q in enumerate(parcs) if i != reference]
    if not others:
        raise SBPError("need at least two parcellations")
    best = np.array([match_nodes(ref, q)[1] for q in others])
    per_node = best.mean(axis=0)
    # divide once at the end so identical runs give exactly 1.0
    weighted = float(np.nansum(ref.sizes() * per_node) / ref.p)
    per_group = {}
    if tags is not None:
        tags = np.asarray(tags)
        for k in range(ref.K):
            members = ref.labels == k
            if not members.any():
                continue
            vals, counts = np.unique(tags[members], return_counts=True)
            per_group.setdefault(str(vals[np.argmax(counts)]), []).append(float(per_node[k]))
    return per_node, weighted, per_group


def reproducibility(cohort, K, lambda_star, agg=AggregationMethod.MEAN_SQUARED, n_samples=20,
                    fraction=0.75, seed=0, sbp_config=None, preference_mode=PreferenceMode.PEARSON,
                    reference_sample=0, n_jobs=1):
    """Refit SBP on random subject subsamples and score node reproducibility.

    Each subsample draws ``round(fraction * n)`` subjects without
    replacement and builds its own A and R. All subsamples share one solver
    seed, so identical subsamples give identical parcellations.
    """
    m = int(round(fraction * cohort.n))
    if m < 3:
        raise TooFewSubjects(f"subsample of {m} subjects is too small")
    if sbp_config is None:
        sbp_config = SBPConfig(K=K)
    solver_seed = derive_seed(seed, "reproducibility", "solver")
    subsamples = [np.sort(rng_for(seed, "reproducibility", "subsample", q).permutation(cohort.n)[:m]).tolist()
                  for q in range(n_samples)]

    def run(idx):
        try:
            return fit_parcellations(cohort.subset(idx), K, [lambda_star], agg, sbp_config,
                                     preference_mode, solver_seed)[lambda_star]
        except SBPError as exc:
            return exc

    if n_jobs == 1:
        fits = [run(idx) for idx in subsamples]
    else:
        from joblib import Parallel, delayed

        fits = Parallel(n_jobs=n_jobs)(delayed(run)(idx) for idx in subsamples)
    failures, parcs, kept = [], [], []
    for q, res in enumerate(fits):
        if isinstance(res, Exception):
            log.warning("subsample %d failed: %s", q, res)
            failures.append({"sample": q, "error": f"{type(res).__name__}: {res}"})
        else:
            parcs.append(res)
            kept.append(q)
    if reference_sample not in kept:
        raise SBPError(f"reference subsample {reference_sample} failed")
    tags = cohort.group_tags()
    per_node, weighted, per_group = summarize_reproducibility(parcs, kept.index(reference_sample), tags)
    return DiceReport(
        per_node_mean_dice=[float(x) for x in per_node],
        weighted_mean_dice=weighted,
        node_size_summary=[_size_summary(p, tags) for p in parcs],
        n_samples=len(parcs),
        subsample_fraction=fraction,
        reference_sample=reference_sample,
        per_group_mean_dice=per_group,
        failures=failures,
        subsamples=subsamples,
        parcellations=parcs,
    )
