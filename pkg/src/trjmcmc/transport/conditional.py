"""Conditional maps on the saturated space built from closed-form pieces."""
from __future__ import annotations

import numpy as np

from ..reference import STANDARD_NORMAL
from .base import ConditionalMap

__all__ = ["BlockConditionalMap", "IdentityConditionalMap"]


class BlockConditionalMap(ConditionalMap):
    """T(xi | k) = per-model map on the theta block, Phi^{-1} o F_ref on auxiliaries.

    Outputs stay in the layout's positions. When each per-model map is an exact
    transport of its conditional target this is an exact conditional transport
    of the saturated target.
    """

    kind = "conditional-block"

    def __init__(self, maps, layout, reference=STANDARD_NORMAL):
        models = tuple(maps)
        super().__init__(layout.n_max, models)
        for k, m in maps.items():
            if m.n != layout.theta_index[k].size:
                raise ValueError(f"map for model {k!r} has n={m.n}, layout expects {layout.theta_index[k].size}")
        self.maps = dict(maps)
        self.layout = layout
        self.reference = reference

    def _apply(self, xi, k_idx, inverse):
        out = np.empty_like(xi)
        ld = np.zeros(len(xi))
        ok = np.ones(len(xi), bool)
        for i, k in enumerate(self.models):
            rows = np.flatnonzero(k_idx == i)
            if rows.size == 0:
                continue
            ti, ai = self.layout.theta_index[k], self.layout.aux_index[k]
            block = xi[np.ix_(rows, ti)]
            m = self.maps[k]
            t, l, o = m._inverse(block) if inverse else m._forward(block)
            out[np.ix_(rows, ti)] = t
            aux = xi[np.ix_(rows, ai)]
            if inverse:
                u = self.reference.from_std_normal(aux)
                _, la = self.reference.to_std_normal(u)
                la = -la
            else:
                u, la = self.reference.to_std_normal(aux)
            out[np.ix_(rows, ai)] = u
            ld[rows] = l + la.sum(axis=1)
            ok[rows] = o
        return out, ld, ok

    def _forward(self, xi, k_idx):
        return self._apply(xi, k_idx, inverse=False)

    def _inverse(self, z, k_idx):
        return self._apply(z, k_idx, inverse=True)


class IdentityConditionalMap(ConditionalMap):
    """Identity for every model: CTRJ then reduces to a plain saturated-space move."""

    kind = "conditional-identity"

    def _forward(self, xi, k_idx):
        return xi.copy(), np.zeros(len(xi)), np.ones(len(xi), bool)

    _inverse = _forward
