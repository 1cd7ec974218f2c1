from dataclasses import dataclass

import numpy as np

from .errors import InvalidLabels


@dataclass(frozen=True)
class Parcellation:
    """Partition of ``p`` voxels into ``K`` nodes, stored as a label vector."""

    labels: np.ndarray
    K: int

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int64)
        if lab.ndim != 1:
            raise InvalidLabels("labels must be one-dimensional")
        if self.K < 1:
            raise InvalidLabels("K must be positive")
        if lab.size and (lab.min() < 0 or lab.max() >= self.K):
            raise InvalidLabels(f"labels must lie in [0, {self.K})")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "K", int(self.K))

    @property
    def p(self):
        return self.labels.size

    def sizes(self):
        return np.bincount(self.labels, minlength=self.K)

    def members(self, k):
        return np.flatnonzero(self.labels == k)

    def node_sets(self):
        return [set(self.members(k).tolist()) for k in range(self.K)]

    def one_hot(self):
        M = np.zeros((self.p, self.K))
        M[np.arange(self.p), self.labels] = 1.0
        return M
