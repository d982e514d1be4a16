"""Reference values for model probabilities.

Three independent routes: analytic marginals when the target carries them,
importance-sampling evidence per model (proposal built from long within-model
runs), grid quadrature for n_k <= 2, and long-chain occupancy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats

from .diagnostics import pooled_mean_se
from .posterior import SamplerSettings, _to_free, _to_theta, sample_posterior

__all__ = [
    "GroundTruth",
    "EvidenceEstimate",
    "importance_evidence",
    "quadrature_evidence",
    "probs_from_evidence",
    "chain_occupancy",
    "ground_truth",
]


@dataclass
class EvidenceEstimate:
    log_z: float
    rel_se: float  # standard error of Z divided by Z
    method: str
    diagnostics: dict = field(default_factory=dict)


@dataclass
class GroundTruth:
    probs: dict
    se: dict
    method: str
    details: dict = field(default_factory=dict)


class _KernelMixture:
    """Defensive proposal: Gaussian kernels at posterior draws plus a broad Student-t."""

    def __init__(self, centers, cov, broad_cov, w_broad=0.1, df=4.0):
        self.centers = centers
        self.n = centers.shape[1]
        self.L = np.linalg.cholesky(cov)
        self.broad_L = np.linalg.cholesky(broad_cov)
        self.mean = centers.mean(axis=0)
        self.w_broad = w_broad
        self.df = df

    def sample(self, size, rng):
        n_b = rng.binomial(size, self.w_broad)
        idx = rng.integers(len(self.centers), size=size - n_b)
        a = self.centers[idx] + rng.standard_normal((size - n_b, self.n)) @ self.L.T
        g = rng.chisquare(self.df, n_b) / self.df
        b = self.mean + (rng.standard_normal((n_b, self.n)) @ self.broad_L.T) / np.sqrt(g)[:, None]
        return np.concatenate([a, b])

    def logpdf(self, x, chunk=2000):
        out = np.empty(len(x))
        Linv = np.linalg.inv(self.L)
        ld = np.sum(np.log(np.diag(self.L)))
        cw = (self.centers @ Linv.T)
        for lo in range(0, len(x), chunk):
            xw = x[lo : lo + chunk] @ Linv.T
            d2 = (xw**2).sum(1)[:, None] - 2 * xw @ cw.T + (cw**2).sum(1)[None, :]
            lk = special.logsumexp(-0.5 * d2, axis=1) - np.log(len(self.centers)) - ld - 0.5 * self.n * np.log(2 * np.pi)
            out[lo : lo + chunk] = lk
        lt = stats.multivariate_t.logpdf(x, self.mean, self.broad_L @ self.broad_L.T, df=self.df)
        return np.logaddexp(np.log1p(-self.w_broad) + out, np.log(self.w_broad) + np.atleast_1d(lt))


def importance_evidence(target, k, samples, n_draws, rng, n_centers=4000):
    """log Z_k by importance sampling on the unconstrained scale.

    The proposal places Gaussian kernels (Silverman bandwidth) at a subsample
    of posterior draws and mixes in a heavy-tailed component for safety.
    """
    pos = target.positive[k]
    phi = _to_free(np.asarray(samples, float), pos)
    n = phi.shape[1]
    cov = np.atleast_2d(np.cov(phi, rowvar=False))
    m = min(n_centers, len(phi))
    centers = phi[rng.choice(len(phi), m, replace=False)]
    h = (4.0 / (m * (n + 2))) ** (1.0 / (n + 4))
    q = _KernelMixture(centers, h * h * cov, 4.0 * cov)
    x = q.sample(n_draws, rng)
    th = _to_theta(x, pos)
    lw = target.log_density(k, th) + x[:, pos].sum(axis=1) - q.logpdf(x)
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    mx = lw.max()
    w = np.exp(lw - mx)
    mean = w.mean()
    se = w.std(ddof=1) / np.sqrt(n_draws)
    ess_w = w.sum() ** 2 / np.sum(w * w)
    return EvidenceEstimate(float(mx + np.log(mean)), float(se / mean), "importance",
                            {"n_draws": n_draws, "weight_ess": float(ess_w)})


def quadrature_evidence(target, k, lo, hi, n_grid=801):
    """log Z_k by the trapezoid rule on a box (n_k <= 2); the error is estimated by halving the grid."""
    n = target.dims[k]
    if n > 2:
        raise ValueError(f"grid quadrature supports n_k <= 2, model {k!r} has {n}")
    lo, hi = np.broadcast_to(lo, (n,)).astype(float), np.broadcast_to(hi, (n,)).astype(float)

    def box_integral(m):
        axes = [np.linspace(lo[i], hi[i], m) for i in range(n)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        lp = target.log_density(k, grid).reshape((m,) * n)
        mx = lp[np.isfinite(lp)].max()
        v = np.exp(lp - mx)
        for i in reversed(range(n)):
            v = integrate.trapezoid(v, axes[i], axis=i)
        return mx + np.log(v)

    fine = box_integral(n_grid)
    coarse = box_integral((n_grid + 1) // 2)
    return EvidenceEstimate(float(fine), float(abs(np.expm1(coarse - fine))), "quadrature", {"n_grid": n_grid})


def probs_from_evidence(evidence):
    """Posterior model probabilities and delta-method standard errors (uniform prior already in pi)."""
    ks = list(evidence)
    lz = np.array([evidence[k].log_z for k in ks])
    r = np.array([evidence[k].rel_se for k in ks])
    p = np.exp(lz - special.logsumexp(lz))
    # d p_i = p_i (r_i e_i - sum_j p_j r_j e_j) with independent e
    var = np.array([p[i] ** 2 * ((1 - p[i]) ** 2 * r[i] ** 2 + sum(p[j] ** 2 * r[j] ** 2 for j in range(len(ks)) if j != i))
                    for i in range(len(ks))])
    return {k: float(v) for k, v in zip(ks, p)}, {k: float(s) for k, s in zip(ks, np.sqrt(var))}


def chain_occupancy(chain, n_batches=50):
    """Occupancy of each model pooled over chains with batch-means standard errors."""
    probs, se = {}, {}
    for i, k in enumerate(chain.models):
        m, s = pooled_mean_se(chain.k == i, n_batches)
        probs[k], se[k] = m, s
    return probs, se


def ground_truth(target, budget=200_000, seed=0, samples=None, settings=SamplerSettings()):
    """Model probabilities with standard errors for ``target``.

    Analytic marginals are returned exactly when attached; otherwise each
    model's evidence is estimated by importance sampling using draws from a
    long within-model run (or the supplied ``samples``).
    """
    if budget < 100_000:
        raise ValueError(f"budget must be at least 1e5 density evaluations, got {budget}")
    if target.true_probs is not None:
        return GroundTruth(dict(target.true_probs), {k: 0.0 for k in target.models}, "analytic")
    rng = np.random.default_rng(seed)
    per_model = budget // len(target.models)
    ev, details = {}, {}
    for i, k in enumerate(target.models):
        s = None if samples is None else samples.get(k)
        if s is None:
            s = sample_posterior(target, k, 10_000, [seed, i], settings).samples
        ev[k] = importance_evidence(target, k, s, per_model, rng)
        details[k] = {"log_z": ev[k].log_z, "rel_se": ev[k].rel_se, **ev[k].diagnostics}
    probs, se = probs_from_evidence(ev)
    return GroundTruth(probs, se, "importance", details)
