import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from trjmcmc.layout import SaturatedLayout
from trjmcmc.reference import GaussianReference
from trjmcmc.samplers import (
    ChainConfig,
    ChainState,
    CTRJProposal,
    GaussianIndependence,
    IndependenceProposal,
    JumpDistribution,
    LopesIndependence,
    RandomWalk,
    TRJProposal,
    acceptance_reduced,
    ctrj_step,
    random_walk_step,
    run_chain,
    trj_step,
)
from trjmcmc.targets import (
    AugmentedTarget,
    gaussian_toy,
    sas_exact_maps,
    sas_target,
    toy_exact_conditional_map,
    toy_exact_maps,
)
from trjmcmc.transport import AffineMap, IdentityConditionalMap, IdentityMap

SAS = sas_target()


def sas_trj():
    return TRJProposal(SAS, sas_exact_maps())


def test_jump_distribution():
    j = JumpDistribution.uniform((1, 2, 3))
    assert j.prob(1, 1) == 0 and j.prob(1, 3) == 0.5
    m = JumpDistribution.from_marginals((1, 2), {1: 0.25, 2: 0.75})
    assert m.prob(2, 1) == 0.25
    draws = m.draw(np.zeros(40_000, int), np.random.default_rng(0).random(40_000))
    assert np.mean(draws == 1) == pytest.approx(0.75, abs=0.01)
    with pytest.raises(ValueError, match="sum to 1"):
        JumpDistribution((1, 2), [[0.5, 0.4], [0.5, 0.5]])
    with pytest.raises(ValueError, match="2x2"):
        JumpDistribution((1, 2), np.eye(3))


def test_reduced_acceptance_values():
    j = JumpDistribution.uniform((1, 2))
    assert acceptance_reduced(SAS, 1, 2, j) == 1.0
    assert acceptance_reduced(SAS, 2, 1, j) == pytest.approx(1 / 3)
    assert acceptance_reduced(SAS, 2, 2, j) == 1.0


@pytest.mark.parametrize("jump", [JumpDistribution.uniform((1, 2)), JumpDistribution.from_marginals((1, 2), {1: 0.4, 2: 0.6})])
def test_exact_transport_alpha_is_reduced_form(jump):
    # with T_k exact, every across-model alpha collapses to the model-ratio expression
    rng = np.random.default_rng(1)
    state = ChainState(2, SAS.sample(2, 1, rng)[0])
    rw = RandomWalk({1: [0.5], 2: [0.3, 0.3]})
    n_across = 0
    for _ in range(400):
        nxt, rec = trj_step(state, sas_trj(), jump, rw, rng)
        if rec.move_type == "across":
            n_across += 1
            assert rec.alpha == pytest.approx(acceptance_reduced(SAS, rec.k, rec.k_proposed, jump), abs=1e-8)
            assert rec.log_ratio == pytest.approx(sum([rec.log_target, rec.log_jump, rec.log_aux, rec.log_jacobian]))
        state = nxt
    assert n_across > 100


def test_trj_alpha_by_hand_for_affine_maps():
    # one 1 -> 2 move with affine maps, every term written out
    maps = {1: AffineMap([0.5], [[2.0]]), 2: AffineMap([1.0, -1.0], [[1.0, 0.0], [0.3, 0.5]])}
    prop = TRJProposal(SAS, maps)
    theta = np.array([[-1.7]])
    u = 0.4
    noise = np.array([[9.9, u]])
    x = prop.embed(1, theta, noise)
    logp = SAS.log_density(1, theta)
    out = prop.propose(np.array([0]), np.array([1]), x, logp, noise)
    z = np.array([(theta[0, 0] - 0.5) / 2.0, u])
    th2 = np.array([1.0, -1.0]) + np.array([[1.0, 0.0], [0.3, 0.5]]) @ z
    assert np.allclose(out.x[0], th2, atol=1e-12)
    # forward log-det of T_1 is log(1/2); inverse log-det of T_2 is log(1 * 0.5)
    want = (SAS.log_density(2, th2) - logp[0]) - stats.norm.logpdf(u) + math.log(1 / 2.0) + math.log(0.5)
    assert out.comps[0].sum() == pytest.approx(want, abs=1e-12)


def test_trj_permutation_is_inverted_on_reverse_pair():
    maps = {1: IdentityMap(1), 2: IdentityMap(2)}
    prop = TRJProposal(SAS, maps, permutations={(1, 2): [1, 0]})
    noise = np.array([[0.0, 0.7]])
    x = prop.embed(1, np.array([[0.2]]), noise)
    up = prop.propose(np.array([0]), np.array([1]), x, SAS.log_density(1, x[:, :1]), noise)
    assert np.allclose(up.x[0], [0.7, 0.2])
    down = prop.propose(np.array([1]), np.array([0]), up.x, up.logp, noise)
    assert down.x[0, 0] == pytest.approx(0.2)
    with pytest.raises(ValueError, match="permute"):
        TRJProposal(SAS, maps, permutations={(1, 2): [0, 0]})


def test_trj_validation():
    with pytest.raises(ValueError, match="no transport map"):
        TRJProposal(SAS, {1: IdentityMap(1)})
    with pytest.raises(ValueError, match="n=1"):
        TRJProposal(SAS, {1: IdentityMap(1), 2: IdentityMap(1)})
    with pytest.raises(TypeError):
        trj_step(ChainState(1, [0.0]), IndependenceProposal(SAS, {1: GaussianIndependence([0], [[1]]), 2: GaussianIndependence([0, 0], np.eye(2))}),
                 JumpDistribution.uniform((1, 2)), RandomWalk({1: [1], 2: [1, 1]}), np.random.default_rng(0))


def test_ctrj_alpha_matches_reduced_form_on_toy():
    t = gaussian_toy()
    aug = AugmentedTarget(t)
    prop = CTRJProposal(aug, toy_exact_conditional_map(t))
    jump = JumpDistribution.uniform(t.models)
    rng = np.random.default_rng(2)
    state = ChainState(1, t.sample(1, 1, rng)[0], u=[0.1])
    rw = RandomWalk({1: [0.2], 2: [0.2, 0.2]})
    for _ in range(200):
        state, rec = ctrj_step(state, prop, jump, rw, rng)
        if rec.move_type == "across":
            assert rec.alpha == pytest.approx(acceptance_reduced(t, rec.k, rec.k_proposed, jump), abs=1e-8)
        assert state.u.size == aug.layout.aux_dim(state.k)
    with pytest.raises(ValueError, match="auxiliary block"):
        ctrj_step(ChainState(1, [0.0]), prop, jump, rw, rng)


def test_ctrj_identity_map_on_saturated_target():
    # identity conditional map: a jump 1 -> 2 keeps the saturated vector; alpha is the density ratio
    ref = GaussianReference(0.0, 3.0)
    aug = AugmentedTarget(SAS, ref)
    prop = CTRJProposal(aug, IdentityConditionalMap(2, SAS.models))
    xi = np.array([[0.4, -0.8]])
    k, k2 = np.array([0]), np.array([1])
    out = prop.propose(k, k2, xi, aug.log_density(1, xi), np.zeros((1, 2)))
    assert np.array_equal(out.x, xi)
    want = SAS.log_density(2, xi[0]) - SAS.log_density(1, xi[0, :1]) - ref.logpdf(-0.8)
    assert out.comps[0].sum() == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError, match="dimension"):
        CTRJProposal(aug, IdentityConditionalMap(3, SAS.models))


def test_independence_alpha_by_hand():
    q1, q2 = GaussianIndependence([0.0], [[4.0]]), GaussianIndependence([1.0, 0.0], np.diag([1.0, 2.0]))
    prop = IndependenceProposal(SAS, {1: q1, 2: q2})
    x = prop.embed(1, np.array([[-1.0]]), None)
    e = np.array([[0.3, -0.2]])
    out = prop.propose(np.array([0]), np.array([1]), x, SAS.log_density(1, x[:, :1]), e)
    th = np.array([1.0 + 0.3, -0.2 * math.sqrt(2)])
    assert np.allclose(out.x[0], th)
    want = (SAS.log_density(2, th) - SAS.log_density(1, np.array([-1.0]))
            + stats.norm(0, 2).logpdf(-1.0) - stats.multivariate_normal([1, 0], np.diag([1, 2])).logpdf(th))
    assert out.comps[0].sum() == pytest.approx(want, abs=1e-12)


def test_lopes_independence_density():
    q = LopesIndependence(2, 1, [0.5, 0.1], np.diag([0.1, 0.2]), [0.3, 0.4], shape=18.0)
    e = np.random.default_rng(3).standard_normal((5000, 4))
    th = q.from_normal(e)
    assert np.all(th[:, 2:] > 0)
    assert th[:, 2].mean() == pytest.approx(18 * 0.3 / 17, rel=0.02)
    want = (stats.multivariate_normal([0.5, 0.1], np.diag([0.2, 0.4])).logpdf(th[:3, :2])
            + stats.invgamma(18, scale=18 * 0.3).logpdf(th[:3, 2]) + stats.invgamma(18, scale=18 * 0.4).logpdf(th[:3, 3]))
    assert np.allclose(q.logpdf(th[:3]), want, rtol=1e-10)
    assert q.logpdf(np.array([[0.5, 0.1, -1.0, 1.0]]))[0] == -np.inf


def test_random_walk_step_on_standard_normal():
    rng = np.random.default_rng(4)
    logd = lambda x: -0.5 * float(x @ x)
    theta, acc, trace = np.zeros(1), 0, []
    for _ in range(40_000):
        theta, a = random_walk_step(theta, logd, 2.4, rng)
        acc += a
        trace.append(theta[0])
    assert 0.3 < acc / 40_000 < 0.6
    assert np.mean(trace) == pytest.approx(0.0, abs=0.05)
    assert np.var(trace) == pytest.approx(1.0, abs=0.08)


def test_random_walk_step_shifted_mean_and_factor():
    rng = np.random.default_rng(5)
    logd = lambda x: -0.5 * float((x[0] - 3.0) ** 2)
    theta, trace = np.zeros(1), []
    for _ in range(40_000):
        theta, _ = random_walk_step(theta, logd, np.array([[2.4]]), rng)
        trace.append(theta[0])
    assert np.mean(trace[2000:]) == pytest.approx(3.0, abs=0.05)
    assert random_walk_step(np.zeros(1), lambda x: -np.inf if x[0] != 0 else 0.0, 1.0, rng)[1] is False


@given(st.integers(0, 10**6))
@settings(max_examples=30)
def test_log_scale_walk_keeps_positivity_and_reverses(seed):
    rng = np.random.default_rng(seed)
    rw = RandomWalk({2: [0.5, 0.5, 0.5]}, log_positive={2: [0, 2]})
    th = np.abs(rng.normal(size=(4, 3))) + 1e-3
    noise = rng.standard_normal((4, 3))
    cand, log_q = rw.perturb(2, th, noise)
    assert np.all(cand[:, [0, 2]] > 0)
    back, log_q_back = rw.perturb(2, cand, -noise)
    assert np.allclose(back, th, rtol=1e-12)
    assert np.allclose(log_q, np.log(cand[:, [0, 2]]).sum(1) - np.log(th[:, [0, 2]]).sum(1))
    assert np.allclose(log_q + log_q_back, 0.0, atol=1e-12)


def test_log_scale_walk_samples_gamma():
    # within-model chain on a Gamma(3, 1) density with multiplicative steps
    from trjmcmc.targets import TransdimensionalTarget

    t = TransdimensionalTarget("g", (1,), {1: 1}, lambda k, x: stats.gamma(3).logpdf(x[:, 0]), positive={1: [0]})
    prop = IndependenceProposal(t, {1: GaussianIndependence([1.0], [[1.0]])})
    out = run_chain(prop, JumpDistribution.uniform((1,)), RandomWalk({1: [0.8]}, t.positive),
                    ChainConfig(n_steps=20_000, n_chains=4, seed=1, keep_theta=True), init=[(1, [1.0])] * 4)
    x = out.theta[:, 1000:, 0].ravel()
    assert x.mean() == pytest.approx(3.0, abs=0.1)
    assert x.var() == pytest.approx(3.0, rel=0.1)


def test_run_chain_is_deterministic_and_seed_sensitive():
    prop = sas_trj()
    jump = JumpDistribution.uniform((1, 2))
    rw = RandomWalk({1: [1.0], 2: [0.3, 0.3]})
    a = run_chain(prop, jump, rw, ChainConfig(n_steps=500, n_chains=3, seed=7))
    b = run_chain(prop, jump, rw, ChainConfig(n_steps=500, n_chains=3, seed=7))
    c = run_chain(prop, jump, rw, ChainConfig(n_steps=500, n_chains=3, seed=8))
    assert np.array_equal(a.k, b.k) and np.array_equal(a.alpha, b.alpha)
    assert not np.array_equal(a.alpha, c.alpha)
    assert not np.array_equal(a.k[0], a.k[1])


def test_run_chain_schedule_and_records(tmp_path):
    prop = sas_trj()
    jump = JumpDistribution.uniform((1, 2))
    out = run_chain(prop, jump, RandomWalk({1: [1.0], 2: [0.3, 0.3]}),
                    ChainConfig(n_steps=30, n_chains=2, seed=0, within_per_across=2))
    assert np.all(out.move[:, 1::3] == 0) and np.all(out.move[:, 2::3] == 0)
    assert np.all(out.move[:, ::3] == 1)  # uniform jump over two models never proposes k' = k
    recs = out.records(0)
    assert len(recs) == 10 and all(r.k != r.k_proposed for r in recs)
    assert all(np.isnan(out.components[:, 1::3]).ravel())
    out.to_csv(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "step,k,accepted,alpha,move_type" and len(rows) == 31
    with pytest.raises(ValueError, match="keep_theta"):
        out.theta_to_csv(tmp_path / "t.csv")


def test_run_chain_input_errors():
    prop = sas_trj()
    rw = RandomWalk({1: [1.0], 2: [0.3, 0.3]})
    with pytest.raises(ValueError, match="disagree"):
        run_chain(prop, JumpDistribution.uniform((2, 1)), rw)
    with pytest.raises(ValueError, match="starting points"):
        run_chain(prop, JumpDistribution.uniform((1, 2)), rw, ChainConfig(n_chains=2), init=[(1, [0.0])])
    with pytest.raises(ValueError):
        ChainConfig(n_steps=0)


def test_toy_chain_occupancy_matches_analytic():
    t = gaussian_toy()
    prop = TRJProposal(t, toy_exact_maps(t))
    jump = JumpDistribution.uniform(t.models)
    out = run_chain(prop, jump, RandomWalk({1: [0.3], 2: [0.3, 0.3]}), ChainConfig(n_steps=20_000, n_chains=4, seed=3))
    assert np.mean(out.k == 0) == pytest.approx(t.true_probs[1], abs=0.02)


def test_saturated_layout_roundtrip():
    lay = SaturatedLayout(4, {"a": [3, 1], "b": [0, 1, 2, 3]})
    x = lay.assemble("a", np.array([[1.0, 2.0]]), np.array([[7.0, 8.0]]))
    assert x.tolist() == [[7.0, 2.0, 8.0, 1.0]]
    th, u = lay.split("a", x)
    assert th.tolist() == [[1.0, 2.0]] and u.tolist() == [[7.0, 8.0]]
    assert lay.aux_mask(("a", "b")).tolist() == [[True, False, True, False], [False] * 4]
    with pytest.raises(ValueError):
        SaturatedLayout(2, {"a": [0, 0]})
