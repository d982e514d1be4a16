import math

import numpy as np
import pytest
from scipy import integrate
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_logdet, random_affine, random_flow, random_sas
from trjmcmc.reference import GaussianReference
from trjmcmc.targets import SAS_PARAMS, sas_target
from trjmcmc.transport import (
    AffineMap,
    ComposedMap,
    ConditionalSplineFlow,
    DomainError,
    FlowSpec,
    IdentityMap,
    LogPositiveMap,
    RQSpline,
    SplineFlow,
    fit_affine,
    flow_log_density,
    init_flow_params,
    load_map,
    make_sas_map,
    rq_spline_eval,
    save_map,
)
from trjmcmc.transport.flows import _standardize

seeds = st.integers(0, 2**32 - 1)


# --- closed-form examples ----------------------------------------------------------


def test_identity_forward_and_inverse():
    m = IdentityMap(2)
    z, ld = m.forward([0.3, -1.2])
    assert np.array_equal(z, [0.3, -1.2]) and ld == 0.0
    th, ld = IdentityMap(3).inverse([1.0, 2.0, 3.0])
    assert np.array_equal(th, [1, 2, 3]) and ld == 0.0


def test_sas_with_zero_skew_unit_tail_is_identity():
    m = make_sas_map([0.0], [1.0], [[1.0]])
    z, ld = m.forward([0.7])
    assert z[0] == pytest.approx(0.7, abs=1e-15) and ld == pytest.approx(0.0, abs=1e-15)
    m2 = make_sas_map([0.0, 0.0], [1.0, 1.0], np.eye(2))
    x = np.random.default_rng(0).normal(size=(50, 2))
    z2, ld2 = m2.forward(x)
    assert np.allclose(z2, x, atol=1e-13) and np.allclose(ld2, 0, atol=1e-13)


def test_sas_model1_at_zero_is_sinh_two():
    m = make_sas_map(*SAS_PARAMS[1])
    z, ld = m.forward([0.0])
    assert z[0] == pytest.approx(math.sinh(2.0), rel=1e-14)
    assert z[0] == pytest.approx(3.62686, abs=1e-5)
    fd = fd_logdet(lambda x: m.forward(x)[0], np.array([[0.0]]))
    assert ld == pytest.approx(fd[0], rel=1e-6)


def test_sas_model2_roundtrip_fixed_point():
    m = make_sas_map(*SAS_PARAMS[2])
    th = np.array([0.5, -0.5])
    back, _ = m.inverse(m.forward(th)[0])
    assert np.max(np.abs(back - th)) < 1e-12


def test_sas_model2_whitens_exact_samples():
    t = sas_target()
    x = t.sample(2, 100_000, np.random.default_rng(1))
    z, _ = make_sas_map(*SAS_PARAMS[2]).forward(x)
    assert np.max(np.abs(z.mean(axis=0))) < 0.02
    assert np.max(np.abs(np.cov(z, rowvar=False) - np.eye(2))) < 0.02


def test_sas_rejects_bad_parameters():
    with pytest.raises(ValueError, match="delta"):
        make_sas_map([0.0], [-1.0], [[1.0]])
    with pytest.raises(ValueError):
        make_sas_map([0.0, 0.0], [1.0, 1.0], [[1.0, 0.5], [0.0, 1.0]])  # upper triangular


def test_affine_scalar_inverse():
    m = AffineMap([0.0], [[2.0]])
    th, ld = m.inverse([1.0])
    assert th[0] == 2.0 and ld == pytest.approx(math.log(2.0))


def test_fit_affine_two_points():
    m = fit_affine(np.array([[0.0], [2.0]]))
    assert m.a[0] == 1.0
    assert m.L[0, 0] == pytest.approx(math.sqrt(2.0))
    assert m.forward([3.0])[0][0] == pytest.approx(math.sqrt(2.0))


def test_fit_affine_on_white_noise_is_near_identity():
    x = np.random.default_rng(2).standard_normal((100_000, 3))
    m = fit_affine(x)
    assert np.max(np.abs(m.a)) < 0.02 and np.max(np.abs(m.L - np.eye(3))) < 0.02


@given(seeds, st.integers(1, 5))
@settings(max_examples=25)
def test_fit_affine_whitens_its_training_set(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(200, n)) @ np.tril(rng.normal(size=(n, n)) + 3 * np.eye(n)) + rng.normal(size=n)
    z, _ = fit_affine(x).forward(x)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-10
    assert np.max(np.abs(np.cov(z, rowvar=False) - np.eye(n))) < 1e-8


def test_fit_affine_singular_covariance_names_the_direction():
    x = np.random.default_rng(0).normal(size=(100, 1))
    with pytest.raises(np.linalg.LinAlgError, match="eigenvalue"):
        fit_affine(np.hstack([x, 2 * x]))
    with pytest.raises(ValueError):
        fit_affine(np.zeros((2, 3)))


# --- splines -------------------------------------------------------------------


def test_identity_spline():
    y, ld = rq_spline_eval(RQSpline.identity(10), 0.37)
    assert y == pytest.approx(0.37, abs=1e-15) and ld == pytest.approx(0.0, abs=1e-14)


@given(seeds, st.integers(1, 12))
def test_spline_interpolates_knots(seed, bins):
    s = RQSpline.random(np.random.default_rng(seed), bins, scale=2.0)
    y, _ = rq_spline_eval(s, s.knot_x)
    assert np.array_equal(y, s.knot_y) or np.max(np.abs(y - s.knot_y)) < 1e-15


@given(seeds, st.integers(1, 12))
@settings(max_examples=30)
def test_spline_roundtrip_and_derivative(seed, bins):
    rng = np.random.default_rng(seed)
    s = RQSpline.random(rng, bins, scale=1.5)
    x = rng.uniform(0.001, 0.999, 1000)
    y, ld = rq_spline_eval(s, x)
    xb, ldi = rq_spline_eval(s, y, "inv")
    assert np.max(np.abs(xb - x)) < 1e-12
    assert np.max(np.abs(ld + ldi)) < 1e-9
    # five-point stencil: narrow bins have large curvature and flat bins tiny slopes
    h = 1e-5
    f = lambda a: rq_spline_eval(s, np.clip(a, 0, 1))[0]
    fd = (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)
    # stay clear of knots, where the derivative is only continuous
    gap = np.min(np.abs(x[:, None] - s.knot_x[None, :]), axis=1) > 1e-4
    assert np.max(np.abs(fd[gap] / np.exp(ld[gap]) - 1)) < 1e-6


@given(seeds, st.integers(1, 12))
@settings(max_examples=30)
def test_spline_monotone_on_grid(seed, bins):
    s = RQSpline.random(np.random.default_rng(seed), bins, scale=3.0)
    y, _ = rq_spline_eval(s, np.linspace(0, 1, 10_000))
    assert np.all(np.diff(y) > 0)
    assert y[0] == 0.0 and y[-1] == 1.0


def test_spline_rejects_outside_unit_interval():
    with pytest.raises(ValueError):
        rq_spline_eval(RQSpline.identity(4), 1.5)
    with pytest.raises(ValueError):
        rq_spline_eval(RQSpline.identity(4), 0.5, direction="sideways")


def test_spline_rejects_invalid_knots():
    with pytest.raises(ValueError):
        RQSpline(np.array([0, 0.6, 0.5, 1.0]), np.linspace(0, 1, 4), np.ones(4))
    with pytest.raises(ValueError):
        RQSpline(np.linspace(0, 1, 4), np.linspace(0, 1, 4), np.array([1, 0, 1, 1.0]))


# --- flows ------------------------------------------------------------------------


@given(seeds, st.integers(1, 6))
@settings(max_examples=20)
def test_flow_roundtrip_antisymmetry_and_fd_logdet(seed, n):
    f = random_flow(n, seed)
    rng = np.random.default_rng(seed + 1)
    x = f.params.shift + rng.normal(size=(200, n)) / f.params.scale
    z, ld = f.forward(x)
    xb, ldi = f.inverse(z)
    assert np.max(np.abs(xb - x)) < 1e-8
    assert np.max(np.abs(ld + ldi)) < 1e-8
    fd = fd_logdet(lambda a: f.forward(a)[0], x[:20])
    assert np.max(np.abs(fd - ld[:20]) / np.maximum(1.0, np.abs(ld[:20]))) < 1e-4


def test_flow_is_autoregressive_within_a_layer():
    rng = np.random.default_rng(4)
    n = 5
    f = SplineFlow(init_flow_params(n, FlowSpec(n_layers=1, n_bins=5, hidden_per_dim=3), rng=rng, zero_last=False))
    x = rng.normal(size=(30, n))
    z, _ = f.forward(x)
    for j in range(n):
        xp = x.copy()
        xp[:, j] += 0.37
        zp, _ = f.forward(xp)
        assert np.array_equal(zp[:, :j], z[:, :j])
        assert not np.allclose(zp[:, j], z[:, j])


def test_identity_flow_log_density_at_zero():
    f = SplineFlow(init_flow_params(1, FlowSpec(n_layers=1, n_bins=4, hidden_per_dim=2)))
    assert flow_log_density(f, np.array([0.0])) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert flow_log_density(IdentityMap(1), np.array([0.0])) == pytest.approx(-0.918939, abs=1e-6)


def test_exact_sas_flow_density_matches_target_density():
    t = sas_target()
    m = make_sas_map(*SAS_PARAMS[1])
    th = np.random.default_rng(5).normal(scale=3, size=(100, 1))
    assert np.max(np.abs(flow_log_density(m, th) + math.log(0.25) - t.log_density(1, th))) < 1e-10


@pytest.mark.parametrize("make,lo,hi", [
    (lambda: make_sas_map(*SAS_PARAMS[1]), -400.0, 20.0),  # long left tail
    (lambda: make_sas_map([0.3], [1.4], [[0.8]]), -10.0, 10.0),
    (lambda: random_flow(1, 9), -10.0, 10.0),
])
def test_flow_density_integrates_to_one(make, lo, hi):
    m = make()
    grid = np.linspace(lo, hi, 2_000_001)[:, None]
    mass = integrate.trapezoid(np.exp(flow_log_density(m, grid)), grid[:, 0])
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_flow_saturation_is_a_domain_error():
    f = random_flow(2, 3)
    far = np.array([[1e6, 0.0]])
    with pytest.raises(DomainError):
        f.forward(far)
    assert flow_log_density(f, far[0]) == -np.inf


def test_maps_validate_input():
    f = random_flow(2, 3)
    with pytest.raises(ValueError, match="length-2"):
        f.forward(np.zeros(3))
    with pytest.raises(DomainError):
        f.forward(np.array([np.nan, 0.0]))
    with pytest.raises(DomainError):
        random_sas(2, 0).forward(np.array([np.inf, 0.0]))


def test_conditional_standardization_is_identity_on_auxiliaries():
    rng = np.random.default_rng(6)
    mask = np.array([[False, True, True], [False, False, False]])
    p = init_flow_params(3, FlowSpec(n_layers=1, n_bins=4, hidden_per_dim=2), shift=rng.normal(size=(2, 3)),
                         scale=np.exp(rng.normal(size=(2, 3))), rng=rng, models=("a", "b"), aux_mask=mask,
                         reference=GaussianReference())
    x = rng.normal(size=(40, 3))
    v, _ = _standardize(p, x, np.zeros(40, int))
    assert np.array_equal(v[:, 1:], x[:, 1:])
    assert not np.allclose(v[:, 0], x[:, 0])


@given(seeds)
@settings(max_examples=10)
def test_conditional_flow_roundtrip(seed):
    rng = np.random.default_rng(seed)
    mask = np.array([[False, True, True], [False, False, True], [False, False, False]])
    p = init_flow_params(3, FlowSpec(n_layers=2, n_bins=5, hidden_per_dim=3), rng=rng, models=(1, 2, 3),
                         aux_mask=mask, zero_last=False)
    f = ConditionalSplineFlow(p)
    x = rng.normal(size=(150, 3))
    k = rng.integers(0, 3, 150)
    z, ld, ok = f.forward_masked(x, k)
    xb, ldi, ok2 = f.inverse_masked(z, k)
    assert ok.all() and ok2.all()
    assert np.max(np.abs(xb - x)) < 1e-8 and np.max(np.abs(ld + ldi)) < 1e-8
    for i in range(3):
        rows = k == i
        fd = fd_logdet(lambda a: f.forward_masked(a, np.full(len(a), i))[0], x[rows][:5])
        assert np.max(np.abs(fd - ld[rows][:5])) < 1e-4 * np.maximum(1, np.abs(ld[rows][:5])).max()


@given(seeds, st.integers(1, 4))
@settings(max_examples=20)
def test_log_positive_composition(seed, n):
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(rng.random(n) < 0.5)
    m = ComposedMap([LogPositiveMap(n, pos), random_affine(n, seed)])
    x = rng.normal(size=(50, n))
    x[:, pos] = np.abs(x[:, pos]) + 0.1
    z, ld = m.forward(x)
    xb, ldi = m.inverse(z)
    assert np.max(np.abs(xb - x)) < 1e-12 and np.max(np.abs(ld + ldi)) < 1e-12
    assert np.allclose(fd_logdet(lambda a: m.forward(a)[0], x[:10], h=1e-6), ld[:10], rtol=1e-5, atol=1e-6)
    if pos.size:
        bad = x[:1].copy()
        bad[0, pos[0]] = -1.0
        with pytest.raises(DomainError):
            m.forward(bad)


@pytest.mark.parametrize("make", [
    lambda: random_sas(3, 1),
    lambda: random_affine(3, 1),
    lambda: random_flow(3, 1),
    lambda: ComposedMap([LogPositiveMap(3, [1]), random_flow(3, 2)]),
])
def test_serialization_is_bit_exact(tmp_path, make):
    m = make()
    save_map(m, tmp_path / "m.json")
    m2 = load_map(tmp_path / "m.json")
    x = np.abs(np.random.default_rng(0).normal(size=(20, 3))) + 0.1
    assert np.array_equal(m.forward(x)[0], m2.forward(x)[0])
    assert np.array_equal(m.forward(x)[1], m2.forward(x)[1])


def test_conditional_flow_serialization(tmp_path):
    rng = np.random.default_rng(3)
    p = init_flow_params(2, FlowSpec(n_layers=1, n_bins=3, hidden_per_dim=2), rng=rng, models=((1, 0), (1, 1)),
                         aux_mask=np.array([[False, True], [False, False]]), zero_last=False)
    f = ConditionalSplineFlow(p)
    save_map(f, tmp_path / "c.json")
    g = load_map(tmp_path / "c.json")
    assert g.models == f.models
    x = rng.normal(size=(10, 2))
    k = np.array([0, 1] * 5)
    assert np.array_equal(f.forward_masked(x, k)[0], g.forward_masked(x, k)[0])
