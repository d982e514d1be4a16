"""Model-probability estimators: running occupancy and the modified Bartolucci estimator (MBE)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .samplers import format_model

__all__ = [
    "AlphaLedger",
    "ModelProbEstimate",
    "EstimatorError",
    "MissingPairError",
    "ZeroAcceptanceError",
    "running_occupancy",
    "bartolucci_bf",
    "model_probs",
    "pairwise_bfs",
    "mbe_ledger",
    "mbe_from_samples",
    "write_replicates_csv",
]


class EstimatorError(ValueError):
    pass


class MissingPairError(EstimatorError):
    pass


class ZeroAcceptanceError(EstimatorError):
    pass


class AlphaLedger:
    """Acceptance probabilities of across-model proposals, keyed by ordered (k, k') pairs."""

    def __init__(self, models):
        self.models = tuple(models)
        self._alphas = {}

    def add(self, k, k2, alphas):
        if k == k2:
            raise ValueError("the ledger only holds across-model proposals (k != k')")
        a = np.atleast_1d(np.asarray(alphas, float))
        if np.any((a < 0) | (a > 1)) or np.any(np.isnan(a)):
            raise ValueError("acceptance probabilities must lie in [0, 1]")
        prev = self._alphas.get((k, k2))
        self._alphas[(k, k2)] = a if prev is None else np.concatenate([prev, a])

    def add_positions(self, src, dst, alphas):
        """Bulk insert from model-position arrays."""
        src, dst, alphas = np.asarray(src), np.asarray(dst), np.asarray(alphas, float)
        for i, k in enumerate(self.models):
            for j, k2 in enumerate(self.models):
                if i != j:
                    m = (src == i) & (dst == j)
                    if m.any():
                        self.add(k, k2, alphas[m])

    @classmethod
    def from_chain(cls, chain, chain_index=None):
        led = cls(chain.models)
        led.add_positions(*chain.across_arrays(chain_index))
        return led

    def alphas(self, k, k2):
        return self._alphas.get((k, k2), np.zeros(0))

    def count(self, k, k2):
        return int(self.alphas(k, k2).size)

    def pairs(self):
        return sorted(self._alphas, key=lambda p: (self.models.index(p[0]), self.models.index(p[1])))


@dataclass
class ModelProbEstimate:
    probs: dict
    replicate: int = 0
    provenance: str = "sample-based"
    flags: list = field(default_factory=list)
    n_domain_errors: int = 0

    @property
    def ok(self):
        return not self.flags and all(np.isfinite(v) for v in self.probs.values())

    def __getitem__(self, k):
        return self.probs[k]


def running_occupancy(trajectory, k):
    """Element t is the fraction of the first t+1 states equal to ``k``."""
    traj = list(trajectory)
    if not traj:
        raise ValueError("empty trajectory")
    hits = np.fromiter((s == k for s in traj), dtype=float, count=len(traj))
    return np.cumsum(hits) / np.arange(1, len(traj) + 1)


def bartolucci_bf(ledger, k, k2, jump=None):
    """Estimate B_{k,k'} = Z_k / Z_{k'} as mean alpha(k' -> k) over mean alpha(k -> k').

    With a non-symmetric jump distribution the ratio above estimates
    pi(k) j_k(k') / (pi(k') j_{k'}(k)); passing ``jump`` removes that factor.
    """
    fwd, rev = ledger.alphas(k, k2), ledger.alphas(k2, k)
    if fwd.size == 0 or rev.size == 0:
        raise MissingPairError(f"no proposals recorded for {'(%r -> %r)' % ((k, k2) if fwd.size == 0 else (k2, k))}")
    den = fwd.mean()
    if den == 0.0:
        raise ZeroAcceptanceError(f"all {fwd.size} proposals {k!r} -> {k2!r} had alpha = 0")
    bf = rev.mean() / den
    if jump is not None:
        bf *= jump.prob(k2, k) / jump.prob(k, k2)
    return float(bf)


def pairwise_bfs(ledger, jump=None, pivot=None):
    """B_{i,j} for every i != pivot (the pairs the probability conversion needs)."""
    models = ledger.models
    pivot = models[0] if pivot is None else pivot
    return {(i, pivot): bartolucci_bf(ledger, i, pivot, jump) for i in models if i != pivot}


def model_probs(bfs, models, pivot=None):
    """Convert Bayes factors (uniform model prior) to probabilities using ``pivot``.

    ``bfs[(a, b)]`` estimates Z_a / Z_b. A missing (a, b) is taken as 1 / bfs[(b, a)].
    """
    models = tuple(models)
    pivot = models[0] if pivot is None else pivot

    def B(a, b):
        if a == b:
            return 1.0
        if (a, b) in bfs:
            v = bfs[(a, b)]
        elif (b, a) in bfs:
            v = 1.0 / bfs[(b, a)] if bfs[(b, a)] != 0 else math.inf
        else:
            raise MissingPairError(f"no Bayes factor estimate for ({a!r}, {b!r})")
        if not (v > 0) or not math.isfinite(v):
            raise EstimatorError(f"Bayes factor ({a!r}, {b!r}) = {v} is not finite and positive")
        return v

    norm = 1.0 + sum(B(i, pivot) for i in models if i != pivot)
    return {k: 1.0 / (B(pivot, k) * norm) for k in models}


def mbe_ledger(samples, proposal, jump, rng):
    """One proposal per stored sample, k' ~ j_k; same-model draws are dropped."""
    models = proposal.models
    xs, ks = [], []
    for i, k in enumerate(models):
        th = np.atleast_2d(np.asarray(samples[k], float))
        if th.shape[0] == 0:
            raise ValueError(f"model {k!r} has no samples")
        if th.shape[1] != proposal.target.dims[k]:
            th = th.reshape(-1, proposal.target.dims[k])
        xs.append(proposal.embed(k, th, rng.standard_normal((len(th), proposal.n_max))))
        ks.append(np.full(len(th), i))
    x = np.concatenate(xs)
    k_idx = np.concatenate(ks)
    k2 = jump.draw(k_idx, rng.random(len(x)))
    noise = rng.standard_normal((len(x), proposal.n_max))
    move = k2 != k_idx
    x, k_idx, k2, noise = x[move], k_idx[move], k2[move], noise[move]
    logp = proposal.log_target_rows(k_idx, x)
    prop = proposal.propose(k_idx, k2, x, logp, noise)
    comps = prop.comps.copy()
    comps[:, 1] = jump.log[k2, k_idx] - jump.log[k_idx, k2]
    with np.errstate(invalid="ignore"):
        s = comps.sum(axis=1)
    la = np.where(prop.ok & ~np.isnan(s), np.minimum(0.0, s), -np.inf)
    ledger = AlphaLedger(models)
    ledger.add_positions(k_idx, k2, np.exp(la))
    ledger.n_domain_errors = int(np.sum(~prop.ok))
    return ledger


def mbe_from_samples(samples, proposal, jump, rng, pivot=None, replicate=0, correct_jump=True):
    """MBE model probabilities from per-model sample sets; failures are flagged, not raised."""
    ledger = mbe_ledger(samples, proposal, jump, rng)
    flags = []
    try:
        bfs = pairwise_bfs(ledger, jump if correct_jump else None, pivot)
        probs = model_probs(bfs, proposal.models, pivot)
    except MissingPairError as e:
        flags.append(f"missing-pair: {e}")
    except ZeroAcceptanceError as e:
        flags.append(f"zero-acceptance: {e}")
    except EstimatorError as e:
        flags.append(f"invalid: {e}")
    if flags:
        probs = {k: math.nan for k in proposal.models}
    est = ModelProbEstimate(probs, replicate, f"sample-based/{proposal.kind}", flags, ledger.n_domain_errors)
    est.ledger = ledger
    return est


def write_replicates_csv(path, rows):
    """rows: iterables of (replicate, proposal_kind, k, pi_hat, n_train, flags)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "proposal_kind", "k", "pi_hat", "n_train", "flags"])
        for rep, kind, k, p, n, flags in rows:
            w.writerow([rep, kind, format_model(k), repr(float(p)), n, ";".join(flags)])
