"""Transport-map abstraction and the closed-form maps.

Convention: ``forward`` always runs target -> reference and ``inverse`` runs
reference -> target. ``logdet`` is the log-absolute Jacobian determinant of
whichever direction was evaluated.
"""
from __future__ import annotations

import numpy as np

from ..reference import std_normal_logpdf

__all__ = [
    "DomainError",
    "TransportMap",
    "IdentityMap",
    "AffineMap",
    "LogPositiveMap",
    "ComposedMap",
    "ConditionalMap",
    "fit_affine",
    "flow_log_density",
]


class DomainError(ValueError):
    """Input lies outside the domain on which a map is a diffeomorphism."""


def _as_batch(x, n, what):
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n:
        raise ValueError(f"{what}: expected length-{n} vectors, got shape {np.shape(x)}")
    return arr, single


class TransportMap:
    """Base class. Subclasses implement ``_forward``/``_inverse`` on (N, n) batches.

    The private methods return ``(out, logdet, ok)`` where ``ok`` flags rows
    that stayed inside the domain; values in rows with ``ok=False`` are garbage.
    """

    kind = "abstract"

    def __init__(self, n):
        if int(n) < 1:
            raise ValueError(f"dimension must be positive, got {n}")
        self.n = int(n)

    def _forward(self, x):
        raise NotImplementedError

    def _inverse(self, z):
        raise NotImplementedError

    def forward(self, theta):
        """``(z, logdet)`` with z = T(theta); raises :class:`DomainError` off-domain."""
        x, single = _as_batch(theta, self.n, f"{self.kind}.forward")
        z, ld, ok = self.forward_masked(x)
        if not ok.all():
            bad = np.flatnonzero(~ok)
            raise DomainError(f"{self.kind}.forward: {bad.size} input row(s) outside the map's domain, first {x[bad[0]]}")
        return (z[0], float(ld[0])) if single else (z, ld)

    def inverse(self, z):
        """``(theta, logdet)`` with theta = T^{-1}(z); logdet = log|J_{T^{-1}}(z)|."""
        zz, single = _as_batch(z, self.n, f"{self.kind}.inverse")
        x, ld, ok = self.inverse_masked(zz)
        if not ok.all():
            bad = np.flatnonzero(~ok)
            raise DomainError(f"{self.kind}.inverse: {bad.size} input row(s) outside the map's domain, first {zz[bad[0]]}")
        return (x[0], float(ld[0])) if single else (x, ld)

    def forward_masked(self, x):
        """Batch forward that never raises on domain problems; returns ``(z, logdet, ok)``."""
        return _guarded(self._forward, x)

    def inverse_masked(self, z):
        return _guarded(self._inverse, z)

    def to_dict(self):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n})"


def _guarded(fn, x):
    x = np.asarray(x, dtype=float)
    finite = np.isfinite(x).all(axis=1)
    safe = np.where(finite[:, None], x, 0.0)
    with np.errstate(all="ignore"):
        out, ld, ok = fn(safe)
    ok = ok & finite & np.isfinite(ld) & np.isfinite(out).all(axis=1)
    if not ok.all():
        out = out.copy()
        out[~ok] = np.nan
        ld = np.where(ok, ld, np.nan)
    return out, ld, ok


class IdentityMap(TransportMap):
    kind = "identity"

    def _forward(self, x):
        return x.copy(), np.zeros(len(x)), np.ones(len(x), bool)

    _inverse = _forward

    def to_dict(self):
        return {"kind": self.kind, "n": self.n}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n"])


def _check_lower(L, n):
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape != (n, n):
        raise ValueError(f"scale factor must be {n}x{n}, got {L.shape}")
    if np.any(np.triu(L, 1) != 0):
        raise ValueError("scale factor must be lower triangular")
    diag = np.diag(L)
    if not np.all(diag > 0):
        raise ValueError(f"scale factor needs a positive diagonal, got {diag}")
    return L


class AffineMap(TransportMap):
    """Whitening map theta -> L^{-1}(theta - a)."""

    kind = "affine"

    def __init__(self, a, L):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        super().__init__(a.size)
        self.a = a
        self.L = _check_lower(L, self.n)
        self._Linv = np.linalg.inv(self.L)
        self._logdet = float(np.sum(np.log(np.diag(self.L))))

    def _forward(self, x):
        z = (x - self.a) @ self._Linv.T
        return z, np.full(len(x), -self._logdet), np.ones(len(x), bool)

    def _inverse(self, z):
        return self.a + z @ self.L.T, np.full(len(z), self._logdet), np.ones(len(z), bool)

    def to_dict(self):
        return {"kind": self.kind, "n": self.n, "a": self.a.tolist(), "L": self.L.ravel().tolist()}

    @classmethod
    def from_dict(cls, d):
        n = d["n"]
        return cls(np.array(d["a"]), np.array(d["L"]).reshape(n, n))


def fit_affine(samples):
    """Affine whitening map from the sample mean and unbiased sample covariance."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N, n = x.shape
    if N < n + 1:
        raise ValueError(f"need at least n+1={n + 1} samples to fit an affine map, got {N}")
    if not np.isfinite(x).all():
        raise ValueError("samples contain non-finite values")
    a = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        i = int(np.argmin(w))
        raise np.linalg.LinAlgError(
            f"sample covariance is not positive definite: smallest eigenvalue {w[i]:.3e} "
            f"with eigenvector {np.round(v[:, i], 4)}"
        ) from None
    if not np.all(np.diag(L) > 0):
        j = int(np.argmin(np.diag(L)))
        raise np.linalg.LinAlgError(f"sample covariance is singular at Cholesky pivot {j}")
    return AffineMap(a, L)


class LogPositiveMap(TransportMap):
    """Log-transforms the listed coordinates (which must be positive)."""

    kind = "log-positive"

    def __init__(self, n, positive):
        super().__init__(n)
        self.positive = np.asarray(sorted(set(int(i) for i in positive)), dtype=int)
        if self.positive.size and (self.positive.min() < 0 or self.positive.max() >= n):
            raise ValueError("positive coordinate index out of range")

    def _forward(self, x):
        z = x.copy()
        pos = x[:, self.positive]
        ok = np.all(pos > 0, axis=1)
        logs = np.log(np.where(pos > 0, pos, 1.0))
        z[:, self.positive] = logs
        return z, -logs.sum(axis=1), ok

    def _inverse(self, z):
        x = z.copy()
        x[:, self.positive] = np.exp(z[:, self.positive])
        return x, z[:, self.positive].sum(axis=1), np.ones(len(z), bool)

    def to_dict(self):
        return {"kind": self.kind, "n": self.n, "positive": self.positive.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n"], d["positive"])


class ComposedMap(TransportMap):
    """``forward`` applies ``maps[0]`` first."""

    kind = "composition"

    def __init__(self, maps):
        maps = list(maps)
        if not maps:
            raise ValueError("composition needs at least one map")
        n = maps[0].n
        if any(m.n != n for m in maps):
            raise ValueError(f"dimension mismatch in composition: {[m.n for m in maps]}")
        super().__init__(n)
        self.maps = maps

    def _forward(self, x):
        ld = np.zeros(len(x))
        ok = np.ones(len(x), bool)
        for m in self.maps:
            x, l, o = m._forward(x)
            ld = ld + l
            ok &= o
        return x, ld, ok

    def _inverse(self, z):
        ld = np.zeros(len(z))
        ok = np.ones(len(z), bool)
        for m in reversed(self.maps):
            z, l, o = m._inverse(z)
            ld = ld + l
            ok &= o
        return z, ld, ok

    def to_dict(self):
        return {"kind": self.kind, "n": self.n, "maps": [m.to_dict() for m in self.maps]}

    def __repr__(self):
        return f"ComposedMap({self.maps})"


def flow_log_density(tmap, theta, k=None):
    """log of the density obtained by pulling the standard Gaussian back through ``tmap``.

    Off-domain points get ``-inf``. For conditional maps pass the model ``k``.
    """
    x = np.asarray(theta, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if k is None:
        z, ld, ok = tmap.forward_masked(x2)
    else:
        z, ld, ok = tmap.forward_masked(x2, tmap.model_index(k, len(x2)))
    out = np.where(ok, std_normal_logpdf(np.where(ok[:, None], z, 0.0)).sum(axis=1) + np.where(ok, ld, 0.0), -np.inf)
    return float(out[0]) if single else out


class ConditionalMap:
    """A family of maps on the saturated space indexed by the model ``k``.

    Batched methods take an integer array of model positions (indices into
    ``models``), one per row; the strict methods take a single model label.
    """

    kind = "abstract-conditional"

    def __init__(self, n, models):
        self.n = int(n)
        self.models = tuple(models)
        self._pos = {k: i for i, k in enumerate(self.models)}

    def model_index(self, k, size):
        if k not in self._pos:
            raise KeyError(f"unknown model {k!r}; known: {self.models}")
        return np.full(size, self._pos[k], dtype=int)

    def _forward(self, xi, k_idx):
        raise NotImplementedError

    def _inverse(self, z, k_idx):
        raise NotImplementedError

    def forward_masked(self, xi, k_idx):
        return _guarded(lambda a: self._forward(a, np.asarray(k_idx, int)), xi)

    def inverse_masked(self, z, k_idx):
        return _guarded(lambda a: self._inverse(a, np.asarray(k_idx, int)), z)

    def forward(self, xi, k):
        x, single = _as_batch(xi, self.n, f"{self.kind}.forward")
        z, ld, ok = self.forward_masked(x, self.model_index(k, len(x)))
        if not ok.all():
            raise DomainError(f"{self.kind}.forward: input outside the domain for model {k!r}")
        return (z[0], float(ld[0])) if single else (z, ld)

    def inverse(self, z, k):
        zz, single = _as_batch(z, self.n, f"{self.kind}.inverse")
        x, ld, ok = self.inverse_masked(zz, self.model_index(k, len(zz)))
        if not ok.all():
            raise DomainError(f"{self.kind}.inverse: input outside the domain for model {k!r}")
        return (x[0], float(ld[0])) if single else (x, ld)
