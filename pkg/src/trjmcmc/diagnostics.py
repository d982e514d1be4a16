"""Chain diagnostics: autocorrelation, effective sample size, batch-means standard errors."""
from __future__ import annotations

import numpy as np

__all__ = ["autocorrelation", "ess", "batch_means_se", "pooled_mean_se"]


def autocorrelation(x):
    x = np.asarray(x, float)
    n = x.size
    d = x - x.mean()
    f = np.fft.rfft(d, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] == 0:
        return np.r_[1.0, np.zeros(n - 1)]
    return acov / acov[0]


def ess(x):
    """Effective sample size from Geyer's initial monotone positive-pair sequence.

    For an (n_chains, T) array the per-chain values are summed.
    """
    x = np.asarray(x, float)
    if x.ndim == 2:
        return float(sum(ess(row) for row in x))
    n = x.size
    if n < 4:
        return float(n)
    rho = autocorrelation(x)
    if rho[1:].std() == 0 and x.std() == 0:
        return float(n)
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    cut = np.flatnonzero(pairs <= 0)
    pairs = pairs[: cut[0]] if cut.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(n / max(tau, 1.0 / n))


def batch_means_se(x, n_batches=50):
    """Standard error of the mean of one chain from non-overlapping batch means."""
    x = np.asarray(x, float)
    b = x.size // n_batches
    if b < 1:
        raise ValueError(f"chain of length {x.size} is too short for {n_batches} batches")
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def pooled_mean_se(x, n_batches=50):
    """Mean over an (n_chains, T) array and its standard error from per-chain batch means."""
    x = np.atleast_2d(np.asarray(x, float))
    se = np.array([batch_means_se(row, n_batches) for row in x])
    return float(x.mean()), float(np.sqrt(np.sum(se**2)) / len(x))
