"""Reversible-jump engine: TRJ, CTRJ and independence across-model moves plus random-walk kernels.

States are stored as padded rows of length ``n_max`` in a
:class:`~trjmcmc.layout.SaturatedLayout`. For TRJ and independence moves the
auxiliary slots are unused (NaN); for CTRJ they hold the auxiliary block.
Everything is batched over rows so many chains (or many MBE proposals) advance
in lockstep; each chain still consumes its own random stream.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .layout import SaturatedLayout
from .reference import STANDARD_NORMAL
from .targets import AugmentedTarget, fa_unpack

__all__ = [
    "JumpDistribution",
    "RandomWalk",
    "TRJProposal",
    "CTRJProposal",
    "IndependenceProposal",
    "GaussianIndependence",
    "LopesIndependence",
    "lopes_proposal",
    "ChainState",
    "ProposalRecord",
    "ChainConfig",
    "ChainOutput",
    "acceptance_reduced",
    "trj_step",
    "ctrj_step",
    "lopes_independence_step",
    "random_walk_step",
    "run_chain",
    "format_model",
]

COMPONENTS = ("target", "jump", "aux", "jacobian")
WITHIN, ACROSS = 0, 1
MOVE_NAMES = {WITHIN: "within", ACROSS: "across"}


def format_model(k):
    return "".join(str(v) for v in k) if isinstance(k, tuple) else str(k)


# --- jump distribution ------------------------------------------------------------


class JumpDistribution:
    """Row-stochastic matrix j_k(k') over the model set."""

    def __init__(self, models, matrix):
        self.models = tuple(models)
        P = np.asarray(matrix, float)
        K = len(self.models)
        if P.shape != (K, K):
            raise ValueError(f"jump matrix must be {K}x{K}, got {P.shape}")
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError(f"jump matrix rows must be non-negative and sum to 1: {P}")
        self.matrix = P
        self.cum = np.cumsum(P, axis=1)
        self.cum[:, -1] = 1.0
        with np.errstate(divide="ignore"):
            self.log = np.log(P)

    @classmethod
    def uniform(cls, models):
        """Uniform over the other models (the default)."""
        K = len(models)
        if K == 1:
            return cls(models, [[1.0]])
        P = (np.ones((K, K)) - np.eye(K)) / (K - 1)
        return cls(models, P)

    @classmethod
    def from_marginals(cls, models, probs):
        """j_k(k') = pi(k'), which makes exact-transport moves rejection-free."""
        p = np.array([probs[k] for k in models], float)
        return cls(models, np.tile(p / p.sum(), (len(models), 1)))

    def prob(self, k, k2):
        return float(self.matrix[self.models.index(k), self.models.index(k2)])

    def draw(self, k_idx, uniforms):
        """Inverse-cdf draw of destination indices from uniforms in [0, 1)."""
        return np.sum(uniforms[:, None] >= self.cum[k_idx], axis=1).astype(int)


def acceptance_reduced(target, k, k2, jump):
    """1 ^ (pi(k')/pi(k)) (j_{k'}(k)/j_k(k')): the acceptance of an exact-transport move."""
    if target.true_probs is None:
        raise ValueError(f"target {target.name!r} has no known model probabilities")
    if k == k2:
        return 1.0
    r = (target.true_probs[k2] / target.true_probs[k]) * (jump.prob(k2, k) / jump.prob(k, k2))
    return min(1.0, r)


# --- within-model kernel ------------------------------------------------------------


class RandomWalk:
    """Gaussian random-walk Metropolis; per-model scale vector or lower-triangular factor.

    Coordinates listed in ``log_positive[k]`` are perturbed on the log scale
    (multiplicatively); ``perturb`` then also returns the Jacobian correction.
    """

    def __init__(self, scales, log_positive=None):
        self.factors = {}
        for k, s in scales.items():
            s = np.asarray(s, float)
            if s.ndim <= 1:
                s = np.atleast_1d(s)
                if np.any(s < 0):
                    raise ValueError(f"random-walk scale for model {k!r} must be non-negative")
                s = np.diag(s)
            self.factors[k] = s
        self.log_positive = {k: np.asarray(v, int) for k, v in (log_positive or {}).items()}

    def perturb(self, k, theta, noise):
        """Candidate rows and the log proposal-density ratio q(theta | cand) / q(cand | theta)."""
        step = noise[:, : theta.shape[1]] @ self.factors[k].T
        pos = self.log_positive.get(k)
        if pos is None or pos.size == 0:
            return theta + step, np.zeros(len(theta))
        cand = theta + step
        with np.errstate(invalid="ignore", divide="ignore"):
            logs = np.log(theta[:, pos]) + step[:, pos]
        cand[:, pos] = np.exp(logs)
        return cand, logs.sum(axis=1) - np.log(theta[:, pos]).sum(axis=1)


# --- proposal sets ------------------------------------------------------------------


@dataclass
class Proposed:
    x: np.ndarray  # (N, n_max) proposed states
    logp: np.ndarray  # target log-density at the proposed states
    comps: np.ndarray  # (N, 4) log-ratio components except the jump term
    ok: np.ndarray  # False where a transport left its domain


class _ProposalBase:
    kind = "abstract"

    def __init__(self, target, layout):
        self.target = target
        self.layout = layout
        self.models = target.models
        self.n_max = layout.n_max

    def log_target(self, k, x):
        return self.target.log_density(k, x[:, self.layout.theta_index[k]])

    def theta(self, k, x):
        return x[..., self.layout.theta_index[k]]

    def embed(self, k, theta, noise):
        """Padded state rows for parameters ``theta`` of model ``k``."""
        x = np.full((len(theta), self.n_max), np.nan)
        x[:, self.layout.theta_index[k]] = theta
        return x

    def log_target_rows(self, k_idx, x):
        out = np.empty(len(x))
        for i, k in enumerate(self.models):
            rows = np.flatnonzero(k_idx == i)
            if rows.size:
                out[rows] = self.log_target(k, x[rows])
        return out

    def propose(self, k_idx, k2_idx, x, logp, noise):
        raise NotImplementedError

    def refresh(self, k_idx, x, noise):
        """Resample auxiliary coordinates (no-op unless the state carries them)."""
        return x, None


class TRJProposal(_ProposalBase):
    """Transport reversible jump: z = T_k(theta), pad or truncate with reference draws, invert T_{k'}.

    ``permutations`` optionally maps an ordered pair ``(k, k')`` to a fixed
    permutation of the max(n_k, n_k') reference coordinates; the reverse pair
    uses the inverse permutation automatically.
    """

    kind = "trj"

    def __init__(self, target, maps, reference=STANDARD_NORMAL, permutations=None):
        super().__init__(target, SaturatedLayout.concatenation(target.dims))
        for k in self.models:
            if k not in maps:
                raise ValueError(f"no transport map for model {k!r}")
            if maps[k].n != target.dims[k]:
                raise ValueError(f"map for model {k!r} has n={maps[k].n}, model dimension is {target.dims[k]}")
        self.maps = dict(maps)
        self.reference = reference
        self.perms = {}
        for (a, b), p in (permutations or {}).items():
            p = np.asarray(p, int)
            m = max(target.dims[a], target.dims[b])
            if sorted(p.tolist()) != list(range(m)):
                raise ValueError(f"permutation for {(a, b)} must permute range({m})")
            self.perms[(a, b)] = p
            self.perms[(b, a)] = np.argsort(p)

    def propose(self, k_idx, k2_idx, x, logp, noise):
        N = len(x)
        dims = np.array([self.target.dims[k] for k in self.models])
        n_from, n_to = dims[k_idx], dims[k2_idx]
        z = np.zeros((N, self.n_max))
        ld = np.zeros(N)
        ok = np.ones(N, bool)
        for i, k in enumerate(self.models):
            rows = np.flatnonzero(k_idx == i)
            if rows.size:
                n = dims[i]
                zi, li, oi = self.maps[k].forward_masked(x[rows, :n])
                z[rows, :n] = np.where(oi[:, None], zi, 0.0)
                ld[rows], ok[rows] = np.where(oi, li, 0.0), oi
        col = np.arange(self.n_max)[None, :]
        fresh = self.reference.from_std_normal(noise)
        asc = (col >= n_from[:, None]) & (col < n_to[:, None])
        desc = (col >= n_to[:, None]) & (col < n_from[:, None])
        z = np.where(asc, fresh, z)
        lnu = self.reference.logpdf(z)
        log_aux = np.where(desc, lnu, 0.0).sum(axis=1) - np.where(asc, lnu, 0.0).sum(axis=1)
        if self.perms:
            for (a, b), p in self.perms.items():
                rows = np.flatnonzero((k_idx == self.models.index(a)) & (k2_idx == self.models.index(b)))
                if rows.size:
                    z[np.ix_(rows, np.arange(p.size))] = z[np.ix_(rows, p)]
        xn = np.full((N, self.n_max), np.nan)
        logp_new = np.full(N, -np.inf)
        for i, k in enumerate(self.models):
            rows = np.flatnonzero(k2_idx == i)
            if rows.size:
                n = dims[i]
                ti, li, oi = self.maps[k].inverse_masked(z[rows, :n])
                xn[rows, :n] = ti
                ld[rows] += np.where(oi, li, 0.0)
                ok[rows] &= oi
                good = rows[ok[rows]]
                if good.size:
                    logp_new[good] = self.target.log_density(k, xn[good, :n])
        comps = np.zeros((N, 4))
        comps[:, 0] = np.where(ok, logp_new - logp, -np.inf)
        comps[:, 2] = log_aux
        comps[:, 3] = ld
        return Proposed(xn, logp_new, comps, ok)


class CTRJProposal(_ProposalBase):
    """Conditional transport reversible jump on the saturated target."""

    kind = "ctrj"

    def __init__(self, augmented: AugmentedTarget, cmap):
        super().__init__(augmented.base, augmented.layout)
        if tuple(cmap.models) != tuple(self.models):
            raise ValueError(f"conditional map models {cmap.models} differ from target models {self.models}")
        if cmap.n != self.n_max:
            raise ValueError(f"conditional map dimension {cmap.n} != n_max {self.n_max}")
        self.aug = augmented
        self.cmap = cmap
        self.reference = augmented.reference

    def log_target(self, k, x):
        return self.aug.log_density(k, x)

    def embed(self, k, theta, noise):
        x = np.empty((len(theta), self.n_max))
        x[:, self.layout.theta_index[k]] = theta
        ai = self.layout.aux_index[k]
        x[:, ai] = self.reference.from_std_normal(noise[:, : ai.size])
        return x

    def refresh(self, k_idx, x, noise):
        x = x.copy()
        for i, k in enumerate(self.models):
            rows = np.flatnonzero(k_idx == i)
            ai = self.layout.aux_index[k]
            if rows.size and ai.size:
                x[np.ix_(rows, ai)] = self.reference.from_std_normal(noise[np.ix_(rows, np.arange(ai.size))])
        return x, self.log_target_rows(k_idx, x)

    def propose(self, k_idx, k2_idx, x, logp, noise):
        z, l1, o1 = self.cmap.forward_masked(x, k_idx)
        z = np.where(o1[:, None], z, 0.0)
        xn, l2, o2 = self.cmap.inverse_masked(z, k2_idx)
        ok = o1 & o2
        logp_new = np.full(len(x), -np.inf)
        for i, k in enumerate(self.models):
            rows = np.flatnonzero((k2_idx == i) & ok)
            if rows.size:
                logp_new[rows] = self.aug.log_density(k, xn[rows])
        comps = np.zeros((len(x), 4))
        comps[:, 0] = np.where(ok, logp_new - logp, -np.inf)
        comps[:, 3] = np.where(ok, l1 + l2, 0.0)
        return Proposed(xn, logp_new, comps, ok)


class GaussianIndependence:
    """q(theta) = N(mean, cov), drawn from standard normals."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, float))
        cov = np.atleast_2d(np.asarray(cov, float))
        try:
            self.chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"proposal covariance is not positive definite (eigenvalues {np.linalg.eigvalsh(cov)})") from None
        self.n = self.mean.size
        self._logdet = float(np.sum(np.log(np.diag(self.chol))))

    def from_normal(self, e):
        return self.mean + e[:, : self.n] @ self.chol.T

    def logpdf(self, theta):
        w = np.linalg.solve(self.chol, (theta - self.mean).T).T
        return -0.5 * np.sum(w * w, axis=1) - self._logdet - 0.5 * self.n * np.log(2 * np.pi)


class LopesIndependence:
    """Loadings ~ N(mu, 2B); each variance Lambda_ii ~ IG(shape, shape * upsilon_i^2)."""

    def __init__(self, d, k, beta_mean, beta_cov, upsilon2, shape=18.0):
        self.d, self.k = d, k
        self.beta = GaussianIndependence(beta_mean, 2.0 * np.asarray(beta_cov, float))
        self.upsilon2 = np.asarray(upsilon2, float)
        self.shape = float(shape)
        self.n = self.beta.n + d

    def from_normal(self, e):
        b = self.beta.from_normal(e[:, : self.beta.n])
        # inverse-cdf transform keeps the draw a deterministic function of the normals
        p = special.ndtr(e[:, self.beta.n : self.n])
        lam = stats.invgamma.ppf(p, self.shape, scale=self.shape * self.upsilon2)
        return np.concatenate([b, lam], axis=1)

    def logpdf(self, theta):
        nb = self.beta.n
        lam = theta[:, nb:]
        safe = np.where(lam > 0, lam, 1.0)
        lig = stats.invgamma.logpdf(safe, self.shape, scale=self.shape * self.upsilon2)
        lig = np.where(lam > 0, lig, -np.inf)
        return self.beta.logpdf(theta[:, :nb]) + lig.sum(axis=1)


def lopes_proposal(target, k, samples, shape=18.0):
    """Fit the independence proposal for ``k`` from posterior samples of that model.

    upsilon_i^2 is taken as the posterior mean of Lambda_ii.
    """
    d = target.extras["d"]
    samples = np.asarray(samples, float)
    nb = samples.shape[1] - d
    beta = samples[:, :nb]
    _, lam = fa_unpack(samples, d, k)
    cov = np.atleast_2d(np.cov(beta, rowvar=False))
    return LopesIndependence(d, k, beta.mean(axis=0), cov, lam.mean(axis=0), shape)


class IndependenceProposal(_ProposalBase):
    """Across-model independence move: theta' ~ q_{k'} regardless of the current theta."""

    kind = "independence"

    def __init__(self, target, proposals):
        super().__init__(target, SaturatedLayout.concatenation(target.dims))
        for k in self.models:
            if proposals[k].n != target.dims[k]:
                raise ValueError(f"independence proposal for {k!r} has the wrong dimension")
        self.q = dict(proposals)

    def propose(self, k_idx, k2_idx, x, logp, noise):
        N = len(x)
        xn = np.full((N, self.n_max), np.nan)
        logp_new = np.full(N, -np.inf)
        log_aux = np.zeros(N)
        for i, k in enumerate(self.models):
            n = self.target.dims[k]
            src = np.flatnonzero(k_idx == i)
            if src.size:
                log_aux[src] += self.q[k].logpdf(x[src, :n])
            dst = np.flatnonzero(k2_idx == i)
            if dst.size:
                th = self.q[k].from_normal(noise[dst])
                xn[dst, :n] = th
                log_aux[dst] -= self.q[k].logpdf(th)
                logp_new[dst] = self.target.log_density(k, th)
        comps = np.zeros((N, 4))
        comps[:, 0] = logp_new - logp
        comps[:, 2] = np.where(np.isfinite(log_aux), log_aux, 0.0)
        return Proposed(xn, logp_new, comps, np.ones(N, bool))


# --- single moves -----------------------------------------------------------------


def _log_alpha(comps):
    with np.errstate(invalid="ignore"):
        s = comps.sum(axis=1)
    s = np.where(np.isnan(s), -np.inf, s)
    return np.minimum(0.0, s)


def across_move(proposal, jump, k_idx, k2_idx, x, logp, noise, log_v):
    """One across-model attempt per row (all rows must have k' != k).

    Returns new (x, logp), acceptance flags, alpha and the (N, 4) log components.
    """
    prop = proposal.propose(k_idx, k2_idx, x, logp, noise)
    comps = prop.comps.copy()
    comps[:, 1] = jump.log[k2_idx, k_idx] - jump.log[k_idx, k2_idx]
    la = np.where(prop.ok, _log_alpha(comps), -np.inf)
    acc = log_v < la
    x_out = np.where(acc[:, None], prop.x, x)
    logp_out = np.where(acc, prop.logp, logp)
    return x_out, logp_out, acc, np.exp(la), comps, ~prop.ok


def within_move(proposal, rw, k_idx, x, logp, noise, log_v):
    """Random-walk Metropolis on the theta block; auxiliaries untouched."""
    x_new = x.copy()
    logp_new = logp.copy()
    acc = np.zeros(len(x), bool)
    alpha = np.zeros(len(x))
    for i, k in enumerate(proposal.models):
        rows = np.flatnonzero(k_idx == i)
        if not rows.size:
            continue
        ti = proposal.layout.theta_index[k]
        cand = x[rows].copy()
        cand[:, ti], log_q = rw.perturb(k, x[np.ix_(rows, ti)], noise[rows])
        lp = proposal.log_target(k, cand)
        with np.errstate(invalid="ignore"):
            la = np.minimum(0.0, lp - logp[rows] + log_q)
        la = np.where(np.isnan(la), -np.inf, la)
        a = log_v[rows] < la
        x_new[rows] = np.where(a[:, None], cand, x[rows])
        logp_new[rows] = np.where(a, lp, logp[rows])
        acc[rows] = a
        alpha[rows] = np.exp(la)
    return x_new, logp_new, acc, alpha


# --- single-state API -------------------------------------------------------------


@dataclass
class ChainState:
    k: object
    theta: np.ndarray
    u: np.ndarray = None  # auxiliary block (CTRJ only)

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, float))
        if self.u is not None:
            self.u = np.atleast_1d(np.asarray(self.u, float))


@dataclass
class ProposalRecord:
    k: object
    k_proposed: object
    alpha: float
    accepted: bool
    move_type: str
    log_target: float = 0.0
    log_jump: float = 0.0
    log_aux: float = 0.0
    log_jacobian: float = 0.0
    domain_error: bool = False

    @property
    def log_ratio(self):
        return self.log_target + self.log_jump + self.log_aux + self.log_jacobian


def _state_row(proposal, state):
    i = proposal.models.index(state.k)
    x = np.full((1, proposal.n_max), np.nan)
    x[0, proposal.layout.theta_index[state.k]] = state.theta
    if state.u is not None:
        x[0, proposal.layout.aux_index[state.k]] = state.u
    return i, x


def _row_state(proposal, k, x, with_aux):
    ti = proposal.layout.theta_index[k]
    u = x[proposal.layout.aux_index[k]] if with_aux else None
    return ChainState(k, x[ti].copy(), None if u is None else u.copy())


def _step(proposal, state, jump, within, rng):
    i, x = _state_row(proposal, state)
    logp = proposal.log_target_rows(np.array([i]), x)
    k2 = int(jump.draw(np.array([i]), rng.random(1))[0])
    noise = rng.standard_normal((1, proposal.n_max))
    log_v = np.log(rng.random(1))
    with_aux = isinstance(proposal, CTRJProposal)
    if k2 == i:
        xn, _, acc, alpha = within_move(proposal, within, np.array([i]), x, logp, noise, log_v)
        rec = ProposalRecord(state.k, state.k, float(alpha[0]), bool(acc[0]), "within")
        return _row_state(proposal, state.k, xn[0], with_aux), rec
    xn, _, acc, alpha, comps, bad = across_move(proposal, jump, np.array([i]), np.array([k2]), x, logp, noise, log_v)
    k_new = proposal.models[k2] if acc[0] else state.k
    rec = ProposalRecord(state.k, proposal.models[k2], float(alpha[0]), bool(acc[0]), "across", *map(float, comps[0]),
                         domain_error=bool(bad[0]))
    return _row_state(proposal, k_new, xn[0], with_aux), rec


def trj_step(state, proposal, jump, within, rng):
    """One Algorithm-1 step: draw k' ~ j_k; k' = k runs the within-model kernel."""
    if not isinstance(proposal, TRJProposal):
        raise TypeError("trj_step needs a TRJProposal")
    return _step(proposal, state, jump, within, rng)


def ctrj_step(state, proposal, jump, within, rng):
    """One saturated-space step; ``state.u`` must hold the auxiliary block."""
    if not isinstance(proposal, CTRJProposal):
        raise TypeError("ctrj_step needs a CTRJProposal")
    need = proposal.layout.aux_dim(state.k)
    if state.u is None or state.u.size != need:
        raise ValueError(f"model {state.k!r} needs an auxiliary block of length {need}")
    return _step(proposal, state, jump, within, rng)


def lopes_independence_step(state, proposal, jump, within, rng):
    if not isinstance(proposal, IndependenceProposal):
        raise TypeError("lopes_independence_step needs an IndependenceProposal")
    return _step(proposal, state, jump, within, rng)


def random_walk_step(theta, log_density, scale, rng):
    """Gaussian random-walk Metropolis step on a fixed-dimension density. Returns (theta, accepted)."""
    theta = np.atleast_1d(np.asarray(theta, float))
    scale = np.asarray(scale, float)
    e = rng.standard_normal(theta.size)
    prop = theta + (scale @ e if scale.ndim == 2 else scale * e)
    la = log_density(prop) - log_density(theta)
    if np.log(rng.random()) < min(0.0, la if np.isfinite(la) else -np.inf):
        return prop, True
    return theta, False


# --- chains ------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainConfig:
    n_steps: int = 10_000
    n_chains: int = 1
    seed: int = 0
    within_per_across: int = 1  # within-model steps between across-model attempts
    refresh_aux: bool = True  # redraw CTRJ auxiliaries after each within-model step
    keep_theta: bool = False

    def __post_init__(self):
        if self.n_steps < 1 or self.n_chains < 1 or self.within_per_across < 0:
            raise ValueError("n_steps and n_chains must be positive, within_per_across non-negative")


_CHUNK = 2048


class _Streams:
    """Per-chain random blocks, drawn a chunk at a time in a fixed order."""

    def __init__(self, seed, n_chains, n_max):
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]
        self.n_max = n_max
        self.pos = _CHUNK

    def next(self):
        if self.pos == _CHUNK:
            blocks = []
            for r in self.rngs:
                blocks.append((
                    r.random(_CHUNK),
                    r.standard_normal((_CHUNK, self.n_max)),
                    r.random(_CHUNK),
                    r.standard_normal((_CHUNK, self.n_max)),
                ))
            self.jump = np.stack([b[0] for b in blocks], axis=1)
            self.noise = np.stack([b[1] for b in blocks], axis=1)
            self.v = np.stack([b[2] for b in blocks], axis=1)
            self.aux = np.stack([b[3] for b in blocks], axis=1)
            self.pos = 0
        p = self.pos
        self.pos += 1
        with np.errstate(divide="ignore"):
            return self.jump[p], self.noise[p], np.log(self.v[p]), self.aux[p]


@dataclass
class ChainOutput:
    models: tuple
    k: np.ndarray  # (C, T) model position after each step
    k_proposed: np.ndarray
    accepted: np.ndarray
    alpha: np.ndarray
    move: np.ndarray  # 0 within, 1 across
    components: np.ndarray  # (C, T, 4), NaN on within-model steps
    domain_error: np.ndarray
    k0: np.ndarray  # starting model positions
    theta: np.ndarray = None  # (C, T, n_max) when kept
    config: ChainConfig = field(default=None)

    @property
    def n_chains(self):
        return self.k.shape[0]

    @property
    def n_steps(self):
        return self.k.shape[1]

    def trajectory(self, chain=0):
        return [self.models[i] for i in self.k[chain]]

    def records(self, chain=0):
        """ProposalRecords of all across-model attempts of one chain."""
        prev = np.concatenate([[self.k0[chain]], self.k[chain, :-1]])
        out = []
        for t in np.flatnonzero(self.move[chain] == ACROSS):
            c = self.components[chain, t]
            out.append(ProposalRecord(self.models[prev[t]], self.models[self.k_proposed[chain, t]],
                                      float(self.alpha[chain, t]), bool(self.accepted[chain, t]), "across",
                                      *map(float, c), domain_error=bool(self.domain_error[chain, t])))
        return out

    def across_arrays(self, chain=None):
        """(source, destination, alpha) position arrays of across-model attempts."""
        chains = range(self.n_chains) if chain is None else [chain]
        src, dst, al = [], [], []
        for c in chains:
            prev = np.concatenate([[self.k0[c]], self.k[c, :-1]])
            m = self.move[c] == ACROSS
            src.append(prev[m])
            dst.append(self.k_proposed[c, m])
            al.append(self.alpha[c, m])
        return np.concatenate(src), np.concatenate(dst), np.concatenate(al)

    def to_csv(self, path, chain=0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "k", "accepted", "alpha", "move_type"])
            for t in range(self.n_steps):
                w.writerow([t + 1, format_model(self.models[self.k[chain, t]]), int(self.accepted[chain, t]),
                            repr(float(self.alpha[chain, t])), MOVE_NAMES[int(self.move[chain, t])]])

    def theta_to_csv(self, path, chain=0):
        if self.theta is None:
            raise ValueError("theta trace was not kept (set keep_theta=True)")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "k"] + [f"x{i + 1}" for i in range(self.theta.shape[2])])
            for t in range(self.n_steps):
                w.writerow([t + 1, format_model(self.models[self.k[chain, t]])]
                           + [repr(float(v)) for v in self.theta[chain, t]])


def initial_states(proposal, ks, thetas, rng_seed=0):
    """Padded state rows for starting points (auxiliaries drawn from the reference)."""
    rng = np.random.default_rng(rng_seed)
    k_idx = np.array([proposal.models.index(k) for k in ks])
    x = np.empty((len(ks), proposal.n_max))
    for c, (k, th) in enumerate(zip(ks, thetas)):
        x[c] = proposal.embed(k, np.atleast_2d(th), rng.standard_normal((1, proposal.n_max)))[0]
    return k_idx, x


def run_chain(proposal, jump, within, config=ChainConfig(), init=None):
    """Run ``config.n_chains`` independent chains in lockstep.

    Steps cycle through one across-model attempt followed by
    ``within_per_across`` within-model steps. ``init`` is a list of (k, theta)
    pairs, one per chain; by default chains start from exact draws of the target.
    """
    C, T = config.n_chains, config.n_steps
    if tuple(jump.models) != tuple(proposal.models):
        raise ValueError("jump distribution and proposal disagree on the model set")
    if init is None:
        ks, thetas = proposal.target.sample_joint(C, np.random.default_rng([config.seed, 2**31]))
    else:
        if len(init) != C:
            raise ValueError(f"need {C} starting points, got {len(init)}")
        ks, thetas = zip(*init)
    k_idx, x = initial_states(proposal, ks, thetas, rng_seed=[config.seed, 2**31 + 1])
    logp = proposal.log_target_rows(k_idx, x)
    if not np.all(np.isfinite(logp)):
        raise ValueError("a starting point has zero target density")
    k0 = k_idx.copy()

    streams = _Streams(config.seed, C, proposal.n_max)
    K_out = np.empty((C, T), np.int32)
    Kp = np.empty((C, T), np.int32)
    ACC = np.empty((C, T), bool)
    AL = np.empty((C, T))
    MV = np.empty((C, T), np.int8)
    CO = np.full((C, T, 4), np.nan)
    DE = np.zeros((C, T), bool)
    TH = np.empty((C, T, proposal.n_max)) if config.keep_theta else None
    period = config.within_per_across + 1
    has_aux = isinstance(proposal, CTRJProposal)

    for t in range(T):
        uj, noise, log_v, aux_noise = streams.next()
        if t % period == 0:
            k2 = jump.draw(k_idx, uj)
            same = k2 == k_idx
            move = np.where(same, WITHIN, ACROSS)
            acc = np.zeros(C, bool)
            alpha = np.zeros(C)
            if same.any():
                r = np.flatnonzero(same)
                xs, ls, a, al = within_move(proposal, within, k_idx[r], x[r], logp[r], noise[r], log_v[r])
                x[r], logp[r], acc[r], alpha[r] = xs, ls, a, al
            if (~same).any():
                r = np.flatnonzero(~same)
                xs, ls, a, al, comps, bad = across_move(proposal, jump, k_idx[r], k2[r], x[r], logp[r], noise[r], log_v[r])
                x[r], logp[r], acc[r], alpha[r] = xs, ls, a, al
                CO[r, t] = comps
                DE[r, t] = bad
                k_idx = k_idx.copy()
                k_idx[r] = np.where(a, k2[r], k_idx[r])
            Kp[:, t] = k2
        else:
            move = np.full(C, WITHIN)
            x, logp, acc, alpha = within_move(proposal, within, k_idx, x, logp, noise, log_v)
            Kp[:, t] = k_idx
            if has_aux and config.refresh_aux:
                x, logp = proposal.refresh(k_idx, x, aux_noise)
        K_out[:, t] = k_idx
        ACC[:, t] = acc
        AL[:, t] = alpha
        MV[:, t] = move
        if TH is not None:
            TH[:, t] = x
    return ChainOutput(proposal.models, K_out, Kp, ACC, AL, MV, CO, DE, k0, TH, config)
