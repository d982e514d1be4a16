"""Placement of model parameters inside a saturated (max-dimension) vector."""
from __future__ import annotations

import numpy as np


class SaturatedLayout:
    """For each model, which saturated coordinates hold theta; the rest hold auxiliaries.

    ``theta_index[k]`` lists positions in order of theta's coordinates. The
    default (``concatenation``) puts theta first and the auxiliaries after it.
    """

    def __init__(self, n_max, theta_index):
        self.n_max = int(n_max)
        self.theta_index = {}
        self.aux_index = {}
        for k, idx in theta_index.items():
            idx = np.asarray(idx, dtype=int)
            if len(set(idx.tolist())) != idx.size or (idx.size and (idx.min() < 0 or idx.max() >= self.n_max)):
                raise ValueError(f"invalid theta positions for model {k!r}: {idx}")
            self.theta_index[k] = idx
            self.aux_index[k] = np.setdiff1d(np.arange(self.n_max), idx)

    @classmethod
    def concatenation(cls, dims):
        n_max = max(dims.values())
        return cls(n_max, {k: np.arange(n) for k, n in dims.items()})

    def aux_dim(self, k):
        return self.aux_index[k].size

    def assemble(self, k, theta, u):
        theta = np.asarray(theta, float)
        u = np.asarray(u, float)
        out = np.empty(theta.shape[:-1] + (self.n_max,))
        out[..., self.theta_index[k]] = theta
        out[..., self.aux_index[k]] = u
        return out

    def split(self, k, xi):
        xi = np.asarray(xi, float)
        return xi[..., self.theta_index[k]], xi[..., self.aux_index[k]]

    def aux_mask(self, models):
        """Boolean (K, n_max) array, True where a coordinate is auxiliary for that model."""
        mask = np.zeros((len(models), self.n_max), dtype=bool)
        for i, k in enumerate(models):
            mask[i, self.aux_index[k]] = True
        return mask

    def to_dict(self, models):
        return {"n_max": self.n_max, "theta_index": [self.theta_index[k].tolist() for k in models]}

    @classmethod
    def from_dict(cls, d, models):
        return cls(d["n_max"], {k: idx for k, idx in zip(models, d["theta_index"])})
