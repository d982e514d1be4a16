import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from trjmcmc.layout import SaturatedLayout
from trjmcmc.reference import GaussianReference
from trjmcmc.targets import (
    VS_MODELS,
    AugmentedTarget,
    Dataset,
    ResidualMixture,
    augmented_log_density,
    fa_dims,
    fa_pack,
    fa_positive_index,
    fa_target,
    fa_unpack,
    gaussian_toy,
    sas_target,
    simulate_fa_data,
    simulate_vs_data,
    vs_layout,
    vs_target,
)

BETA = np.array([[1.0, 0.0], [0.8, 0.5], [0.6, -0.5], [0.7, 0.0]])


def sas_density_by_hand(x, eps, delta, cov):
    # density of sinh((asinh(Z) + eps) / delta) with Z ~ N(0, cov)
    s = np.sinh(delta * np.arcsinh(x) - eps)
    jac = np.prod(delta * np.cosh(delta * np.arcsinh(x) - eps) / np.sqrt(1 + x * x), axis=-1)
    return stats.multivariate_normal(np.zeros(len(eps)), cov).pdf(s) * jac


def test_sas_matches_hand_written_density():
    t = sas_target()
    x = np.random.default_rng(0).normal(size=(20, 2)) * 2
    want = 0.75 * sas_density_by_hand(x, np.array([1.5, -2.0]), np.array([1.0, 1.5]), [[1, 0.99], [0.99, 1]])
    assert np.allclose(np.exp(t.log_density(2, x)), want, rtol=1e-10)
    x1 = np.linspace(-5, 5, 11)[:, None]
    want1 = 0.25 * sas_density_by_hand(x1, np.array([-2.0]), np.array([1.0]), [[1.0]])
    assert np.allclose(np.exp(t.log_density(1, x1)), want1, rtol=1e-10)


def test_sas_model_masses():
    t = sas_target()
    m1, _ = integrate.quad(lambda a: math.exp(t.log_density(1, np.array([a]))), -np.inf, np.inf, limit=200)
    assert m1 == pytest.approx(0.25, abs=1e-7)
    # model 2 is a strongly correlated ridge; integrate in the Gaussian coordinates instead
    draws = t.sample(2, 200_000, np.random.default_rng(1))
    assert np.all(np.isfinite(t.log_density(2, draws)))


def test_sas_sampler_matches_density():
    t = sas_target()
    x = t.sample(1, 100_000, np.random.default_rng(2))[:, 0]
    cdf = lambda a: integrate.quad(lambda s: math.exp(t.log_density(1, np.array([s]))) / 0.25, -np.inf, a)[0]
    for q in (-3.0, -1.0, 0.0):
        assert np.mean(x <= q) == pytest.approx(cdf(q), abs=0.006)


def test_toy_evidence_by_quadrature():
    t = gaussian_toy()
    f = lambda *b: math.exp(t.log_density(len(b), np.array(b)))
    (m1, c1), (m2, c2) = t.extras["posterior"][1], t.extras["posterior"][2]
    w1, w2 = 12 * np.sqrt(np.diag(c1)), 12 * np.sqrt(np.diag(c2))
    z1, _ = integrate.quad(f, m1[0] - w1[0], m1[0] + w1[0], epsabs=0, epsrel=1e-10)
    z2, _ = integrate.dblquad(lambda b1, b0: f(b0, b1), m2[0] - w2[0], m2[0] + w2[0], m2[1] - w2[1], m2[1] + w2[1],
                              epsabs=0, epsrel=1e-10)
    assert z1 / (z1 + z2) == pytest.approx(t.true_probs[1], rel=1e-6)
    assert math.log(z1) == pytest.approx(math.log(0.5) + t.extras["log_evidence"][1], abs=1e-6)


def test_toy_sampler_moments():
    t = gaussian_toy()
    mean, cov = t.extras["posterior"][2]
    x = t.sample(2, 200_000, np.random.default_rng(3))
    assert np.allclose(x.mean(axis=0), mean, atol=4 * np.sqrt(np.diag(cov) / 200_000))
    assert np.allclose(np.cov(x, rowvar=False), cov, rtol=0.02, atol=1e-4)


def fa_oracle(y, theta, d, k):
    beta, lam = fa_unpack(theta, d, k)
    beta, lam = beta[0], lam[0]
    if np.any(lam <= 0) or np.any(np.diag(beta) <= 0):
        return -np.inf
    cov = beta @ beta.T + np.diag(lam)
    ll = stats.multivariate_normal(np.zeros(d), cov).logpdf(y).sum()
    lp = 0.0
    for i in range(d):
        for j in range(min(i + 1, k)):
            lp += stats.halfnorm.logpdf(beta[i, j]) if i == j else stats.norm.logpdf(beta[i, j])
    lp += stats.invgamma(1.1, scale=0.05).logpdf(lam).sum()
    return math.log(0.5) + ll + lp


@pytest.mark.parametrize("k", [1, 2])
def test_fa_log_density_matches_scipy(k):
    data = simulate_fa_data(2, BETA, np.full(4, 0.5), 60, seed=4)
    t = fa_target(data)
    rng = np.random.default_rng(5)
    for _ in range(5):
        theta = rng.normal(size=fa_dims(4, k))
        theta[fa_positive_index(4, k)] = np.exp(rng.normal(size=len(fa_positive_index(4, k))) * 0.5)
        assert t.log_density(k, theta) == pytest.approx(fa_oracle(data.y, theta[None], 4, k), rel=1e-10)


def test_fa_support_and_dims():
    t = fa_target(simulate_fa_data(2, BETA, np.full(4, 0.5), 20, seed=0))
    assert t.dims == {1: 8, 2: 11}
    assert fa_positive_index(4, 2).tolist() == [0, 2, 7, 8, 9, 10]
    theta = np.ones(11)
    theta[2] = -0.1
    assert t.log_density(2, theta) == -np.inf
    theta[2] = 1.0
    theta[8] = 0.0
    assert t.log_density(2, theta) == -np.inf


def test_fa_without_observations_is_the_prior():
    t = fa_target(Dataset(y=np.zeros((0, 4))))
    f = lambda a: math.exp(t.log_density(1, np.array([a, 0.1, 0.2, 0.3, 1.0, 1.0, 1.0, 1.0])))
    mass, _ = integrate.quad(f, 0, np.inf)
    expected = 0.5 * np.prod(stats.norm.pdf([0.1, 0.2, 0.3])) * stats.invgamma(1.1, scale=0.05).pdf(1.0) ** 4
    assert mass == pytest.approx(expected, rel=1e-8)


@given(st.integers(1, 5), st.integers(0, 10**6))
@settings(max_examples=25)
def test_fa_pack_unpack_roundtrip(d, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, d + 1))
    theta = rng.normal(size=(3, fa_dims(d, k)))
    beta, lam = fa_unpack(theta, d, k)
    assert np.all(np.triu(beta, 1) == 0)
    assert np.array_equal(fa_pack(beta, lam, d, k), theta)


def test_fa_input_errors():
    with pytest.raises(ValueError, match="lower triangular"):
        simulate_fa_data(2, BETA.T @ np.ones((4, 2)), np.ones(2), 10, 0)
    with pytest.raises(ValueError, match="variances"):
        simulate_fa_data(2, BETA, -np.ones(4), 10, 0)
    with pytest.raises(ValueError, match="factors"):
        fa_target(Dataset(y=np.zeros((5, 3))), k_set=(1, 4))


def test_vs_log_density_by_loop():
    data = simulate_vs_data(2)
    t = vs_target(data)
    rng = np.random.default_rng(6)
    mix = ResidualMixture()
    for k in VS_MODELS:
        beta = rng.normal(size=sum(k))
        full = np.zeros(4)
        full[np.flatnonzero(k)] = beta
        want = 2 * math.log(0.5) + stats.norm(0, 10).logpdf(beta).sum()
        for xi, yi in zip(data.X, data.y):
            r = yi - full[0] - full[1:] @ xi
            want += math.log(0.9 * stats.norm.pdf(r) + 0.1 * stats.norm(0, 5).pdf(r))
        assert t.log_density(k, beta) == pytest.approx(want, rel=1e-11)
    assert mix.logpdf(np.array(0.0)) == pytest.approx(math.log(0.9 / math.sqrt(2 * math.pi) + 0.02 / math.sqrt(2 * math.pi)))


def test_vs_layout_keeps_coefficient_slots():
    lay = vs_layout()
    assert lay.theta_index[(1, 0, 1, 1)].tolist() == [0, 2, 3]
    assert lay.aux_index[(1, 0, 1, 1)].tolist() == [1]
    with pytest.raises(ValueError, match="3 covariate"):
        vs_target(Dataset(y=np.zeros(4), X=np.zeros((4, 2))))


def test_augmented_density_adds_reference():
    t = sas_target()
    ref = GaussianReference(0.0, 2.0)
    aug = AugmentedTarget(t, ref)
    xi = np.array([[0.3, -1.2]])
    assert aug.log_density(1, xi)[0] == pytest.approx(t.log_density(1, xi[:, :1])[0] + stats.norm(0, 2).logpdf(-1.2))
    assert aug.log_density(2, xi)[0] == pytest.approx(t.log_density(2, xi[0]))
    assert augmented_log_density(aug, 1, [0.3], [-1.2]) == pytest.approx(aug.log_density(1, xi)[0])
    with pytest.raises(ValueError, match="auxiliary"):
        augmented_log_density(aug, 1, [0.3], [])
    with pytest.raises(ValueError, match="n_max"):
        AugmentedTarget(t, layout=SaturatedLayout(3, {1: [0], 2: [1, 2]}))


def test_target_validation():
    t = sas_target()
    with pytest.raises(KeyError, match="unknown model"):
        t.log_density(3, np.zeros(1))
    with pytest.raises(ValueError, match="length-2"):
        t.log_density(2, np.zeros(3))
    assert t.log_density(2, np.array([np.nan, 0.0])) == -np.inf
    assert t.log_density(1, np.array([np.inf])) == -np.inf
    with pytest.raises(KeyError, match="no exact sampler"):
        vs_target(simulate_vs_data(0)).sample(VS_MODELS[0], 3, np.random.default_rng(0))


def test_joint_sampler_frequencies():
    ks, thetas = sas_target().sample_joint(40_000, np.random.default_rng(7))
    assert np.mean(np.array(ks) == 1) == pytest.approx(0.25, abs=0.01)
    assert all(len(th) == k for k, th in zip(ks[:100], thetas[:100]))


def test_dataset_csv_roundtrip(tmp_path):
    data = simulate_vs_data(1, n=7)
    data.to_csv(tmp_path / "vs.csv")
    back = Dataset.from_csv(tmp_path / "vs.csv", covariates=True)
    assert np.array_equal(back.X, data.X) and np.array_equal(back.y, data.y)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError, match="line 3"):
        Dataset.from_csv(tmp_path / "bad.csv")
    with pytest.raises(ValueError, match="non-finite"):
        Dataset(y=np.array([1.0, np.nan]))
