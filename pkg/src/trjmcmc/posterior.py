"""Within-model posterior sampling by lockstep random-walk Metropolis.

Positive coordinates are sampled on the log scale (with the Jacobian), the
proposal covariance is tuned during burn-in only and then frozen, so the
retained draws come from a fixed pi_k-invariant kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .diagnostics import ess

__all__ = ["PosteriorSamples", "SamplerSettings", "sample_posterior", "find_mode"]


@dataclass(frozen=True)
class SamplerSettings:
    n_chains: int = 20
    burn: int = 4000
    thin: int = 5
    adapt_rounds: int = 8
    target_accept: float = 0.25


@dataclass
class PosteriorSamples:
    k: object
    samples: np.ndarray  # (n, n_k) on the original scale
    acceptance: float
    ess: np.ndarray  # per coordinate, pooled over chains (unconstrained scale)
    n_steps: int


def _to_free(theta, pos):
    phi = np.array(theta, float)
    phi[..., pos] = np.log(phi[..., pos])
    return phi


def _to_theta(phi, pos):
    th = np.array(phi, float)
    th[..., pos] = np.exp(th[..., pos])
    return th


def _free_log_density(target, k, pos):
    def f(phi):
        phi = np.atleast_2d(phi)
        return target.log_density(k, _to_theta(phi, pos)) + phi[:, pos].sum(axis=1)

    return f


def find_mode(target, k, start=None):
    """Posterior mode on the unconstrained scale and an inverse-Hessian estimate there."""
    pos = target.positive[k]
    n = target.dims[k]
    f = _free_log_density(target, k, pos)
    x0 = np.zeros(n) if start is None else _to_free(np.asarray(start, float), pos)
    res = optimize.minimize(lambda p: -f(p)[0], x0, method="BFGS")
    cov = np.atleast_2d(res.hess_inv) if hasattr(res, "hess_inv") else np.eye(n)
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    cov = (v * np.clip(w, 1e-8, 1e2)) @ v.T
    return res.x, cov


def sample_posterior(target, k, n, seed, settings=SamplerSettings(), start=None):
    """Draw ``n`` (approximately independent) samples from pi_k."""
    rng = np.random.default_rng(seed)
    pos = target.positive[k]
    dim = target.dims[k]
    f = _free_log_density(target, k, pos)
    mode, cov = find_mode(target, k, start)
    C = settings.n_chains
    chol = np.linalg.cholesky(cov)
    phi = mode + 0.5 * rng.standard_normal((C, dim)) @ chol.T
    lp = f(phi)
    bad = ~np.isfinite(lp)
    phi[bad], lp[bad] = mode, f(mode[None, :])[0]
    scale = 2.38 / np.sqrt(dim)

    def advance(phi, lp, steps, L, keep_every=0):
        kept, acc = [], 0
        for t in range(steps):
            cand = phi + rng.standard_normal((C, dim)) @ L.T
            lc = f(cand)
            with np.errstate(invalid="ignore"):
                a = np.log(rng.random(C)) < lc - lp
            phi = np.where(a[:, None], cand, phi)
            lp = np.where(a, lc, lp)
            acc += a.sum()
            if keep_every and (t + 1) % keep_every == 0:
                kept.append(phi.copy())
        return phi, lp, acc / (steps * C), kept

    per = max(1, settings.burn // max(1, settings.adapt_rounds))
    for _ in range(settings.adapt_rounds):
        phi, lp, rate, hist = advance(phi, lp, per, scale * chol, keep_every=1)
        pooled = np.concatenate(hist[len(hist) // 2 :])
        emp = np.atleast_2d(np.cov(pooled, rowvar=False)) + 1e-10 * np.eye(dim)
        try:
            chol = np.linalg.cholesky(emp)
        except np.linalg.LinAlgError:
            pass
        scale *= float(np.clip(max(rate, 1e-3) / settings.target_accept, 0.3, 3.0))
    steps = int(np.ceil(n / C)) * settings.thin
    phi, lp, rate, kept = advance(phi, lp, steps, scale * chol, keep_every=settings.thin)
    arr = np.stack(kept, axis=1)  # (C, n/C, dim)
    e = np.array([ess(arr[:, :, i]) for i in range(dim)])
    samples = _to_theta(arr.reshape(-1, dim)[:n], pos)
    return PosteriorSamples(k, samples, float(rate), e, steps)
