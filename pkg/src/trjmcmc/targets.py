"""Transdimensional targets: the benchmark posteriors, a conjugate toy, and the saturated augmentation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .layout import SaturatedLayout
from .reference import STANDARD_NORMAL, std_normal_logpdf
from .transport.base import AffineMap
from .transport.conditional import BlockConditionalMap
from .transport.sas import SasMap, inverse_sinh_arcsinh, log_dinverse_sinh_arcsinh, sinh_arcsinh

__all__ = [
    "TransPoint",
    "TransdimensionalTarget",
    "AugmentedTarget",
    "Dataset",
    "augment",
    "augmented_log_density",
    "sas_target",
    "sas_exact_maps",
    "SAS_PARAMS",
    "SAS_WEIGHTS",
    "gaussian_toy",
    "toy_exact_maps",
    "toy_exact_conditional_map",
    "fa_dims",
    "fa_pack",
    "fa_unpack",
    "fa_positive_index",
    "fa_target",
    "simulate_fa_data",
    "VS_MODELS",
    "ResidualMixture",
    "vs_target",
    "vs_layout",
    "simulate_vs_data",
]


@dataclass(frozen=True)
class TransPoint:
    k: object
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, float)))


class TransdimensionalTarget:
    """Unnormalized density on the union of model spaces.

    ``log_fn(k, theta)`` receives a validated (N, n_k) batch and returns N
    values; anything non-finite or NaN it produces is reported as ``-inf``.
    """

    def __init__(self, name, models, dims, log_fn, true_probs=None, samplers=None,
                 positive=None, extras=None):
        self.name = name
        self.models = tuple(models)
        self.dims = {k: int(dims[k]) for k in self.models}
        if any(n < 1 for n in self.dims.values()):
            raise ValueError("model dimensions must be positive")
        self._log_fn = log_fn
        self.true_probs = None if true_probs is None else {k: float(true_probs[k]) for k in self.models}
        self.samplers = samplers or {}
        self.positive = {k: np.asarray((positive or {}).get(k, []), int) for k in self.models}
        self.extras = extras or {}
        self._pos = {k: i for i, k in enumerate(self.models)}

    @property
    def n_max(self):
        return max(self.dims.values())

    def index(self, k):
        if k not in self._pos:
            raise KeyError(f"unknown model {k!r}; known: {self.models}")
        return self._pos[k]

    def log_density(self, k, theta):
        n = self.dims[k] if k in self._pos else self.index(k)
        x = np.asarray(theta, float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != n:
            raise ValueError(f"model {k!r} expects length-{n} parameters, got shape {x.shape}")
        finite = np.isfinite(x2).all(axis=1)
        with np.errstate(all="ignore"):
            out = np.asarray(self._log_fn(k, np.where(finite[:, None], x2, 0.0)), float)
        out = np.where(finite & ~np.isnan(out), out, -np.inf)
        out = np.where(out == np.inf, -np.inf, out)  # +inf would mean an unnormalizable density
        return float(out[0]) if single else out

    def __call__(self, point: TransPoint):
        return self.log_density(point.k, point.theta)

    def sample(self, k, size, rng):
        if k not in self.samplers:
            raise KeyError(f"no exact sampler for model {k!r} of target {self.name!r}")
        return self.samplers[k](size, rng)

    def sample_joint(self, size, rng):
        """Exact draws of (k, theta) when marginals and samplers are available."""
        if self.true_probs is None or len(self.samplers) < len(self.models):
            raise ValueError(f"target {self.name!r} has no exact joint sampler")
        p = np.array([self.true_probs[k] for k in self.models])
        idx = rng.choice(len(self.models), size=size, p=p)
        ks = [self.models[i] for i in idx]
        thetas = [None] * size
        for i, k in enumerate(self.models):
            rows = np.flatnonzero(idx == i)
            if rows.size:
                draws = self.sample(k, rows.size, rng)
                for r, d in zip(rows, draws):
                    thetas[r] = d
        return ks, thetas

    def __repr__(self):
        return f"TransdimensionalTarget({self.name!r}, dims={self.dims})"


# --- saturated augmentation ---------------------------------------------------


class AugmentedTarget:
    """pi(k, theta) times the reference density of the auxiliary block."""

    def __init__(self, base, reference=STANDARD_NORMAL, layout=None):
        self.base = base
        self.reference = reference
        self.layout = layout or SaturatedLayout.concatenation(base.dims)
        if self.layout.n_max != base.n_max:
            raise ValueError(f"layout n_max {self.layout.n_max} != max model dimension {base.n_max}")
        for k in base.models:
            if self.layout.theta_index[k].size != base.dims[k]:
                raise ValueError(f"layout for model {k!r} does not match its dimension")

    @property
    def models(self):
        return self.base.models

    @property
    def n_max(self):
        return self.layout.n_max

    def log_density(self, k, xi):
        """Saturated log-density of a full (N, n_max) block for model ``k``."""
        theta, u = self.layout.split(k, xi)
        aux = self.reference.logpdf(u).sum(axis=-1) if u.shape[-1] else 0.0
        return self.base.log_density(k, theta) + aux

    def assemble(self, k, theta, u):
        return self.layout.assemble(k, theta, u)


def augment(target, reference=STANDARD_NORMAL, layout=None):
    return AugmentedTarget(target, reference, layout)


def augmented_log_density(aug, k, theta, u):
    theta = np.atleast_1d(np.asarray(theta, float))
    u = np.atleast_1d(np.asarray(u, float)) if np.size(u) else np.zeros(0)
    need = aug.n_max - aug.base.dims[k]
    if u.shape[-1] != need:
        raise ValueError(f"model {k!r} needs {need} auxiliary values, got {u.shape[-1]}")
    return aug.log_density(k, aug.assemble(k, theta, u))


# --- datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    """Observations ``y`` (rows) with optional covariates ``X``."""

    y: np.ndarray
    X: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, float)
        if self.X is not None:
            self.X = np.asarray(self.X, float)
            if len(self.X) != len(self.y):
                raise ValueError(f"row counts disagree: X has {len(self.X)}, y has {len(self.y)}")
            if not np.isfinite(self.X).all():
                raise ValueError("covariates contain non-finite entries")
        if not np.isfinite(self.y).all():
            raise ValueError("observations contain non-finite entries")

    @property
    def n_rows(self):
        return len(self.y)

    def to_csv(self, path):
        cols, header = [], []
        if self.X is not None:
            cols.append(self.X)
            header += [f"x{i + 1}" for i in range(self.X.shape[1])]
        y2 = self.y.reshape(len(self.y), -1)
        cols.append(y2)
        header += ["y"] if self.X is not None else [f"y{i + 1}" for i in range(y2.shape[1])]
        table = np.hstack(cols) if cols else np.zeros((0, 0))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in table:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, n_columns=None, covariates=False):
        """Load a CSV with a header row; with ``covariates`` the last column is the response."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty file")
        header, body = rows[0], [r for r in rows[1:] if r]
        for i, r in enumerate(body):
            if len(r) != len(header):
                raise ValueError(f"{path}: line {i + 2} has {len(r)} fields, header has {len(header)}")
        if n_columns is not None and len(header) != n_columns:
            raise ValueError(f"{path}: expected {n_columns} columns, found {len(header)}")
        table = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
        meta = {"source": "file", "path": str(path)}
        if covariates:
            return cls(y=table[:, -1], X=table[:, :-1], meta=meta)
        return cls(y=table, meta=meta)


# --- sinh-arcsinh benchmark -----------------------------------------------------

SAS_WEIGHTS = {1: 0.25, 2: 0.75}
SAS_PARAMS = {
    1: (np.array([-2.0]), np.array([1.0]), np.array([[1.0]])),
    2: (np.array([1.5, -2.0]), np.array([1.0, 1.5]), np.linalg.cholesky(np.array([[1.0, 0.99], [0.99, 1.0]]))),
}


def _sas_log_density(theta, eps, delta, L):
    # phi_{LL^T}(S^{-1}(theta)) |J_{S^{-1}}(theta)|
    s = inverse_sinh_arcsinh(theta, eps, delta)
    w = np.linalg.solve(L, s.T).T
    n = theta.shape[1]
    log_norm = -0.5 * n * np.log(2 * np.pi) - np.sum(np.log(np.diag(L)))
    return log_norm - 0.5 * np.sum(w * w, axis=1) + log_dinverse_sinh_arcsinh(theta, eps, delta).sum(axis=1)


def sas_target():
    """Two-model sinh-arcsinh mixture with weights 1/4 and 3/4 and dimensions 1 and 2."""

    def log_fn(k, theta):
        eps, delta, L = SAS_PARAMS[k]
        return np.log(SAS_WEIGHTS[k]) + _sas_log_density(theta, eps, delta, L)

    def sampler(k):
        eps, delta, L = SAS_PARAMS[k]

        def draw(size, rng):
            z = rng.standard_normal((size, eps.size))
            return sinh_arcsinh(z @ L.T, eps, delta)

        return draw

    return TransdimensionalTarget(
        "sas", (1, 2), {1: 1, 2: 2}, log_fn, true_probs=SAS_WEIGHTS,
        samplers={k: sampler(k) for k in (1, 2)},
    )


def sas_exact_maps():
    return {k: SasMap(*SAS_PARAMS[k]) for k in (1, 2)}


# --- conjugate Gaussian regression toy -----------------------------------------


def gaussian_toy(n_obs=20, slope=0.5, intercept=0.5, sigma=1.0, tau=1.0, seed=3):
    """Intercept-only (n=1) versus intercept+slope (n=2) regression with known noise.

    Priors are N(0, tau^2) per coefficient and p(k) is uniform, so both the
    model evidences and the per-model posteriors are Gaussian in closed form.
    """
    rng = np.random.default_rng(seed)
    x = np.linspace(-1.0, 1.0, n_obs)
    y = intercept + slope * x + sigma * rng.standard_normal(n_obs)
    designs = {1: np.ones((n_obs, 1)), 2: np.column_stack([np.ones(n_obs), x])}
    post, log_ev = {}, {}
    for k, X in designs.items():
        prec = X.T @ X / sigma**2 + np.eye(X.shape[1]) / tau**2
        cov = np.linalg.inv(prec)
        mean = cov @ X.T @ y / sigma**2
        post[k] = (mean, cov)
        log_ev[k] = stats.multivariate_normal.logpdf(y, np.zeros(n_obs), sigma**2 * np.eye(n_obs) + tau**2 * X @ X.T)
    m = max(log_ev.values())
    w = {k: math.exp(v - m) for k, v in log_ev.items()}
    probs = {k: w[k] / sum(w.values()) for k in w}

    def log_fn(k, beta):
        X = designs[k]
        r = y[None, :] - beta @ X.T
        ll = std_normal_logpdf(r / sigma).sum(axis=1) - n_obs * np.log(sigma)
        lp = std_normal_logpdf(beta / tau).sum(axis=1) - beta.shape[1] * np.log(tau)
        return np.log(0.5) + ll + lp

    def sampler(k):
        mean, cov = post[k]
        C = np.linalg.cholesky(cov)

        def draw(size, rng):
            return mean + rng.standard_normal((size, mean.size)) @ C.T

        return draw

    data = Dataset(y=y, X=x[:, None], meta={"source": "synthetic", "seed": seed})
    return TransdimensionalTarget(
        "toy", (1, 2), {1: 1, 2: 2}, log_fn, true_probs=probs,
        samplers={k: sampler(k) for k in (1, 2)},
        extras={"posterior": post, "log_evidence": log_ev, "data": data},
    )


def toy_exact_maps(target):
    """Whitening maps built from the analytic posteriors (exact transports)."""
    return {k: AffineMap(m, np.linalg.cholesky(c)) for k, (m, c) in target.extras["posterior"].items()}


def toy_exact_conditional_map(target, layout=None):
    layout = layout or SaturatedLayout.concatenation(target.dims)
    return BlockConditionalMap(toy_exact_maps(target), layout)


# --- factor analysis ------------------------------------------------------------


def fa_dims(d, k):
    return d * (k + 1) - k * (k - 1) // 2


def _fa_beta_index(d, k):
    # free entries of a lower-triangular d x k loading matrix, row-major
    return [(i, j) for i in range(d) for j in range(min(i + 1, k))]


def fa_unpack(theta, d, k):
    """theta (N, n_k) -> loadings (N, d, k) and idiosyncratic variances (N, d)."""
    theta = np.atleast_2d(theta)
    idx = _fa_beta_index(d, k)
    beta = np.zeros((len(theta), d, k))
    rows, cols = zip(*idx)
    beta[:, rows, cols] = theta[:, : len(idx)]
    return beta, theta[:, len(idx) :]


def fa_pack(beta, lam, d, k):
    beta = np.asarray(beta, float).reshape(-1, d, k)
    lam = np.asarray(lam, float).reshape(-1, d)
    rows, cols = zip(*_fa_beta_index(d, k))
    return np.concatenate([beta[:, rows, cols], lam], axis=1)


def fa_positive_index(d, k):
    """Positions in theta of the loading diagonal and of the variances."""
    idx = _fa_beta_index(d, k)
    diag = [p for p, (i, j) in enumerate(idx) if i == j]
    return np.array(diag + list(range(len(idx), len(idx) + d)), int)


IG_SHAPE, IG_SCALE = 1.1, 0.05


def _fa_log_prior(beta, lam, k):
    N, d, _ = beta.shape
    lower = np.tril(np.ones((d, k), bool), -1)
    diag = np.eye(d, k, dtype=bool)
    lp = std_normal_logpdf(beta[:, lower]).sum(axis=1)
    lp = lp + (np.log(2.0) + std_normal_logpdf(beta[:, diag])).sum(axis=1)
    a, b = IG_SHAPE, IG_SCALE
    safe = np.where(lam > 0, lam, 1.0)
    lp = lp + (a * np.log(b) - special.gammaln(a) - (a + 1) * np.log(safe) - b / safe).sum(axis=1)
    return lp


def _fa_log_lik(beta, lam, S, n_obs):
    N, d, _ = beta.shape
    if n_obs == 0:
        return np.zeros(N)
    sigma = beta @ np.swapaxes(beta, 1, 2) + lam[:, :, None] * np.eye(d)
    C = np.linalg.cholesky(sigma)
    logdet = 2.0 * np.log(np.diagonal(C, axis1=1, axis2=2)).sum(axis=1)
    Cinv = np.linalg.inv(C)
    tr = np.einsum("nij,jk,nik->n", Cinv, S, Cinv)  # tr(Sigma^{-1} S)
    return -0.5 * (n_obs * (d * np.log(2 * np.pi) + logdet) + tr)


def fa_target(data, k_set=(1, 2)):
    """Bayesian factor analysis posterior over the number of factors.

    theta_k stores the free loadings row-major followed by the d variances.
    Loadings below the diagonal get N(0, 1) priors, diagonal loadings
    half-normal(1), variances inverse-gamma(1.1, 0.05); p(k) is uniform.
    """
    y = np.atleast_2d(np.asarray(data.y, float))
    if data.n_rows == 0:
        y = np.zeros((0, y.shape[-1]))
    n_obs, d = y.shape
    S = y.T @ y
    k_set = tuple(int(k) for k in k_set)
    for k in k_set:
        if not 1 <= k <= d:
            raise ValueError(f"number of factors must lie in [1, {d}], got {k}")
    log_pk = -np.log(len(k_set))

    def log_fn(k, theta):
        beta, lam = fa_unpack(theta, d, k)
        diag = np.diagonal(beta, axis1=1, axis2=2)
        ok = np.all(lam > 0, axis=1) & np.all(diag > 0, axis=1)
        out = np.full(len(theta), -np.inf)
        if ok.any():
            b, l = beta[ok], lam[ok]
            out[ok] = log_pk + _fa_log_prior(b, l, k) + _fa_log_lik(b, l, S, n_obs)
        return out

    return TransdimensionalTarget(
        "fa", k_set, {k: fa_dims(d, k) for k in k_set}, log_fn,
        positive={k: fa_positive_index(d, k) for k in k_set},
        extras={"d": d, "n_obs": n_obs, "data": data},
    )


def simulate_fa_data(k_true, beta, lam, N, seed):
    beta = np.asarray(beta, float)
    lam = np.asarray(lam, float)
    if beta.ndim != 2 or beta.shape[1] != k_true:
        raise ValueError(f"loadings must be d x {k_true}, got shape {beta.shape}")
    d = beta.shape[0]
    if np.any(np.triu(beta, 1) != 0) or np.any(np.diag(beta) <= 0):
        raise ValueError("loadings must be lower triangular with a positive diagonal")
    if lam.shape != (d,) or np.any(lam <= 0):
        raise ValueError("variances must be a positive length-d vector")
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((N, k_true)) @ beta.T + rng.standard_normal((N, d)) * np.sqrt(lam)
    return Dataset(y=y, meta={"source": "synthetic", "seed": seed, "k_true": k_true})


# --- block variable selection ----------------------------------------------------

VS_MODELS = ((1, 0, 0, 0), (1, 1, 0, 0), (1, 0, 1, 1), (1, 1, 1, 1))


@dataclass(frozen=True)
class ResidualMixture:
    """Residual density weight * N(0, sd_small^2) + (1 - weight) * N(0, sd_large^2)."""

    weight: float = 0.9
    sd_small: float = 1.0
    sd_large: float = 5.0

    def logpdf(self, r):
        a = np.log(self.weight) + std_normal_logpdf(r / self.sd_small) - np.log(self.sd_small)
        b = np.log1p(-self.weight) + std_normal_logpdf(r / self.sd_large) - np.log(self.sd_large)
        return np.logaddexp(a, b)


def vs_layout():
    """Saturated positions follow the coefficient index, so beta_i keeps its slot across models."""
    return SaturatedLayout(4, {k: np.flatnonzero(np.array(k)) for k in VS_MODELS})


def vs_target(data, mixture=ResidualMixture(), prior_sd=10.0):
    X = np.asarray(data.X, float)
    y = np.asarray(data.y, float).ravel()
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"variable selection needs 3 covariate columns, got shape {X.shape}")
    design = np.column_stack([np.ones(len(y)), X])
    cols = {k: np.flatnonzero(np.array(k)) for k in VS_MODELS}
    log_pk = 2 * np.log(0.5)  # k1, k2 ~ Bernoulli(1/2)

    def log_fn(k, beta):
        r = y[None, :] - beta @ design[:, cols[k]].T
        lp = (std_normal_logpdf(beta / prior_sd) - np.log(prior_sd)).sum(axis=1)
        return log_pk + lp + mixture.logpdf(r).sum(axis=1)

    return TransdimensionalTarget(
        "vs", VS_MODELS, {k: len(c) for k, c in cols.items()}, log_fn,
        extras={"data": data, "mixture": mixture, "prior_sd": prior_sd},
    )


def simulate_vs_data(seed, n=80, noise_sd=5.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    b0 = np.where(np.arange(n) < n // 2, 1.0, 6.0)
    y = b0 + X[:, 0] + noise_sd * rng.standard_normal(n)
    return Dataset(y=y, X=X, meta={"source": "synthetic", "seed": seed})
