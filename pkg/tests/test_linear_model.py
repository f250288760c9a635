import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from invariance_gap import gaussian as gs
from invariance_gap import linear_model as lm
from invariance_gap.invariance import data_related_bound, finite_beta_likelihood

S2Y = 1.0 / (2.0 * math.pi * math.e)
SLOPE = 0.5 * (math.log(1 + 10 * 2 * math.pi * math.e) + 1 / (1 + 10 * 2 * math.pi * math.e) - 1)


def fig_model(k, n=10):
    return lm.TranslationLinearModel.isotropic(k, np.ones(n), S2Y, 1.0)


def random_model(rng, k, n=4):
    x = rng.normal(size=k)
    return lm.TranslationLinearModel(x, rng.normal(size=n), rng.uniform(0.2, 2.0), rng.normal(size=k), rng.uniform(0.5, 3.0, k))


def test_b_matrix_examples():
    np.testing.assert_array_equal(lm.b_matrix(np.ones(2)), [[1.0], [-1.0]])
    x = np.array([1.0, 2.0, 4.0])
    b = lm.b_matrix(x)
    np.testing.assert_allclose(b, [[1, 0], [0, 1], [-0.25, -0.5]])
    np.testing.assert_allclose(x @ b, 0.0, atol=1e-15)
    assert lm.b_matrix(np.ones(1)).shape == (1, 0)
    with pytest.raises(ValueError):
        lm.b_matrix(np.array([1.0, 0.0]))


def test_model_rejects_zero_last_input():
    with pytest.raises(ValueError):
        lm.TranslationLinearModel(np.array([1.0, 0.0]), np.ones(1), 1.0, np.zeros(2), np.ones(2))


def test_model_json_round_trip():
    m = random_model(np.random.default_rng(0), 3)
    back = lm.TranslationLinearModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.x, m.x)
    np.testing.assert_array_equal(back.prior_var, m.prior_var)
    theta = lm.LikelihoodParams(np.ones(3), np.full(3, 2.0))
    np.testing.assert_array_equal(lm.LikelihoodParams.from_json(theta.to_json()).lam, theta.lam)


def test_true_posterior_scalar():
    m = lm.TranslationLinearModel(np.ones(1), np.ones(1), 1.0, np.zeros(1), np.ones(1))
    post = lm.true_posterior(m)
    np.testing.assert_allclose(post.mean, [0.5])
    np.testing.assert_allclose(post.dense_cov(), [[0.5]])


def test_true_posterior_matches_sequential_conditioning():
    m = fig_model(5)
    post = lm.true_posterior(m)
    affine = gs.AffineMap(m.x[None, :] / m.k, np.zeros(1))
    seq = gs.MomentGaussian(m.prior_mean, np.diag(m.prior_var))
    for y in m.y:
        seq = gs.condition_affine(affine, [[m.sigma2_y]], seq, [y])
    np.testing.assert_allclose(post.mean, seq.mean, atol=1e-10)
    np.testing.assert_allclose(post.dense_cov(), seq.cov, atol=1e-10)


def test_condition_affine_small_case_matches_true_posterior():
    m = lm.TranslationLinearModel(np.ones(3), np.ones(1), 1.0, np.zeros(3), np.full(3, 3.0))
    seq = gs.condition_affine(gs.AffineMap(np.ones((1, 3)) / 3, [0.0]), [[1.0]], gs.MomentGaussian(np.zeros(3), np.full(3, 3.0)), [1.0])
    post = lm.true_posterior(m)
    np.testing.assert_allclose(post.mean, seq.mean, atol=1e-12)
    np.testing.assert_allclose(post.dense_cov(), seq.cov, atol=1e-12)


def test_true_posterior_woodbury_matches_dense_inverse():
    m = random_model(np.random.default_rng(1), 50)
    c = m.n / (m.k**2 * m.sigma2_y)
    prec = c * np.outer(m.x, m.x) + np.diag(1.0 / m.prior_var)
    cov = np.linalg.inv(prec)
    mean = cov @ (m.prior_mean / m.prior_var + m.x * m.y.sum() / (m.k * m.sigma2_y))
    post = lm.true_posterior(m)
    np.testing.assert_allclose(post.dense_cov(), cov, atol=1e-10)
    np.testing.assert_allclose(post.mean, mean, atol=1e-10)


def test_mixture_likelihood_examples():
    m = fig_model(4)
    n = lm.mixture_likelihood(m, lm.LikelihoodParams(np.zeros(4), np.ones(4)))
    np.testing.assert_allclose(n.precision, 0.25 * np.ones((4, 4)))
    m2 = lm.TranslationLinearModel(np.array([1.0, 2.0]), np.ones(1), 1.0, np.zeros(2), np.ones(2))
    n2 = lm.mixture_likelihood(m2, lm.LikelihoodParams(np.zeros(2), np.ones(2)))
    assert n2.scale == pytest.approx(0.2)
    np.testing.assert_array_equal(n2.direction, [1.0, 2.0])


def test_mixture_likelihood_agrees_with_large_beta_along_x():
    m = fig_model(3)
    theta = lm.LikelihoodParams(np.array([0.2, -0.1, 0.4]), np.array([0.5, 1.0, 1.5]))
    g = finite_beta_likelihood(theta.g0(), lm.b_matrix(m.x), 1e6)
    along_x = m.x @ g.cov @ m.x
    assert 1.0 / along_x == pytest.approx(lm.mixture_likelihood(m, theta).scale, rel=1e-6)


def test_q0_examples():
    m = lm.TranslationLinearModel(np.ones(3), np.ones(1), 1.0, np.zeros(3), np.ones(3))
    q0, _ = lm.q0_posterior(m, lm.LikelihoodParams(np.zeros(3), np.ones(3)))
    np.testing.assert_allclose(q0.cov, np.full(3, 0.5))
    theta = lm.LikelihoodParams(np.ones(3), np.full(3, 1e12))
    q0, _ = lm.q0_posterior(m, theta)
    assert np.max(np.abs(q0.mean - m.prior_mean)) < 1e-6
    assert np.max(np.abs(q0.cov - m.prior_var)) < 1e-6


def test_q0_log_normaliser_against_monte_carlo():
    from invariance_gap.mc import mc_expectation

    m = random_model(np.random.default_rng(2), 3)
    theta = lm.LikelihoodParams(np.zeros(3), np.full(3, 2.0))
    _, log_z = lm.q0_posterior(m, theta)
    g0 = theta.g0()
    est = mc_expectation(lambda r, n: gs.sample_from(m.prior, r, n), lambda w: np.exp(gs.log_density(g0, w)), 200_000, 3)
    assert abs(est.z_score(math.exp(log_z))) < 3.0


def test_qmix_single_dimension_is_q0():
    m = lm.TranslationLinearModel(np.ones(1), np.ones(2), 0.5, np.zeros(1), np.ones(1))
    theta = lm.LikelihoodParams([0.3], [0.7])
    a, b = lm.qmix_posterior(m, theta), lm.q0_posterior(m, theta)[0]
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-15)
    np.testing.assert_allclose(a.dense_cov(), b.dense_cov(), atol=1e-15)


@pytest.mark.parametrize("k", [1, 2, 7, 50, 200])
def test_qmix_at_optimum_is_true_posterior(k):
    m = fig_model(k)
    q = lm.qmix_posterior(m, lm.theta_mix_star(m))
    truth = lm.true_posterior(m)
    np.testing.assert_allclose(q.mean, truth.mean, atol=1e-10)
    np.testing.assert_allclose(q.variances(), truth.variances(), atol=1e-10)
    if k <= 50:
        np.testing.assert_allclose(q.dense_cov(), truth.dense_cov(), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 15), st.integers(0, 2**32 - 1))
def test_qmix_at_optimum_is_true_posterior_general_x(k, seed):
    m = random_model(np.random.default_rng(seed), k)
    q = lm.qmix_posterior(m, lm.theta_mix_star(m))
    truth = lm.true_posterior(m)
    np.testing.assert_allclose(q.mean, truth.mean, atol=1e-10)
    np.testing.assert_allclose(q.dense_cov(), truth.dense_cov(), atol=1e-10)


def test_theta_mix_star_examples():
    m = lm.TranslationLinearModel.isotropic(4, np.ones(8), 2.0, 1.0)
    theta = lm.theta_mix_star(m)
    np.testing.assert_allclose(theta.m, np.ones(4))
    np.testing.assert_allclose(theta.lam, np.ones(4))
    fig = fig_model(6)
    np.testing.assert_allclose(lm.theta_mix_star(fig).lam, np.full(6, 6 / (10 * 2 * math.pi * math.e)), rtol=1e-14)


def test_theta_0_star_variance_is_k_times_larger():
    m = lm.TranslationLinearModel.isotropic(4, np.ones(8), 2.0, 1.0)
    np.testing.assert_allclose(lm.theta_0_star(m).lam, np.full(4, 4.0))
    for k in (2, 10, 50):
        fm = fig_model(k)
        assert lm.theta_0_star(fm).lam[0] / lm.theta_mix_star(fm).lam[0] == pytest.approx(k, rel=1e-14)


def test_theta_0_star_precision_matches_true_posterior_diagonal():
    m = random_model(np.random.default_rng(4), 6)
    q0, _ = lm.q0_posterior(m, lm.theta_0_star(m))
    post_prec = np.linalg.inv(lm.true_posterior(m).dense_cov())
    np.testing.assert_allclose(1.0 / q0.cov, np.diag(post_prec), rtol=1e-10)
    np.testing.assert_allclose(q0.mean, lm.true_posterior(m).mean, atol=1e-10)


def test_theta_0_star_matches_numerical_optimum():
    m = random_model(np.random.default_rng(5), 3)

    def neg(theta):
        t = lm.LikelihoodParams(theta[:3], np.exp(theta[3:]))
        return -lm.elbo_terms(m, t, "mean_field").elbo

    res = optimize.minimize(neg, np.zeros(6), method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 40_000})
    best = lm.elbo_terms(m, lm.theta_0_star(m), "mean_field").elbo
    assert best >= -res.fun - 1e-9
    assert best == pytest.approx(-res.fun, abs=1e-6)


def test_reused_location_variant_is_suboptimal():
    m = fig_model(5)
    opt = lm.elbo_terms(m, lm.theta_0_star(m), "mean_field").elbo
    reused = lm.elbo_terms(m, lm.theta_0_star(m, mean="reused"), "mean_field").elbo
    assert reused < opt


@pytest.mark.parametrize("which,theta_fn", [("mean_field", lm.theta_0_star), ("invariance_abiding", lm.theta_mix_star)])
@pytest.mark.parametrize("k", [2, 10, 50])
def test_optimum_beats_random_perturbations(which, theta_fn, k):
    m = fig_model(k)
    theta = theta_fn(m)
    best = lm.elbo_terms(m, theta, which).elbo
    rng = np.random.default_rng(k)
    for _ in range(100):
        pert = lm.LikelihoodParams(theta.m + 0.1 * rng.normal(size=k), theta.lam * np.exp(0.3 * rng.normal(size=k)))
        assert lm.elbo_terms(m, pert, which).elbo <= best + 1e-12


def test_closed_form_gap_examples():
    assert lm.invariance_gap_closed_form(fig_model(1), lm.theta_mix_star(fig_model(1))) == 0.0
    m = fig_model(5)
    assert lm.invariance_gap_closed_form(m, lm.LikelihoodParams(np.zeros(5), np.full(5, 1e12))) < 1e-6
    for k in (2, 3, 10, 40):
        fm = fig_model(k)
        theta = lm.theta_mix_star(fm)
        gap = lm.invariance_gap_closed_form(fm, theta)
        assert gap == pytest.approx(SLOPE * (k - 1), rel=1e-12)
        assert gap == pytest.approx(lm.invariance_gap(fm, theta), rel=1e-10)


def test_closed_form_gap_rejects_unequal_components():
    m = fig_model(3)
    with pytest.raises(ValueError):
        lm.invariance_gap_closed_form(m, lm.LikelihoodParams(np.zeros(3), np.array([1.0, 2.0, 1.0])))


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 60),
    st.floats(0.01, 100.0),
    st.floats(0.01, 100.0),
    st.floats(-5.0, 5.0),
    st.floats(-5.0, 5.0),
)
def test_closed_form_gap_equals_generic_kl(k, lam, s2, m, mu):
    model = lm.TranslationLinearModel(np.ones(k), np.ones(1), 1.0, np.full(k, mu), np.full(k, s2))
    theta = lm.LikelihoodParams(np.full(k, m), np.full(k, lam))
    assert lm.invariance_gap_closed_form(model, theta) == pytest.approx(lm.invariance_gap(model, theta), rel=1e-10, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_ell_equality_and_gap_identity(k, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, k)
    # the two expected log-likelihoods coincide when lam is proportional to the prior variance
    theta = lm.LikelihoodParams(rng.normal(size=k), rng.uniform(0.05, 5.0) * m.prior_var)
    e0 = lm.elbo_terms(m, theta, "mean_field")
    e1 = lm.elbo_terms(m, theta, "invariance_abiding")
    assert abs(e0.ell - e1.ell) < 1e-10
    assert e0.predictive_variance == pytest.approx(e1.predictive_variance, rel=1e-12)
    assert abs((e1.elbo - e0.elbo) - lm.invariance_gap(m, theta)) < 1e-9


def test_ell_differs_for_non_proportional_variances():
    m = lm.TranslationLinearModel(np.ones(2), np.ones(1), 1.0, np.zeros(2), np.ones(2))
    theta = lm.LikelihoodParams(np.zeros(2), np.array([1.0, 3.0]))
    e0 = lm.elbo_terms(m, theta, "mean_field")
    e1 = lm.elbo_terms(m, theta, "invariance_abiding")
    assert abs(e0.predictive_variance - e1.predictive_variance) > 1e-3


@pytest.mark.parametrize("k", [1, 2, 5, 30, 200])
def test_optimal_qmix_elbo_is_log_evidence(k):
    m = fig_model(k)
    assert abs(lm.elbo_terms(m, lm.theta_mix_star(m), "invariance_abiding").elbo - lm.log_evidence(m)) < 1e-9


def test_log_evidence_matches_joint_gaussian():
    from scipy import stats

    m = random_model(np.random.default_rng(6), 4, n=3)
    mean = np.full(m.n, m.x @ m.prior_mean / m.k)
    cov = m.sigma2_y * np.eye(m.n) + np.sum(m.x**2 * m.prior_var) / m.k**2
    assert lm.log_evidence(m) == pytest.approx(stats.multivariate_normal(mean, cov).logpdf(m.y), abs=1e-10)


def test_optimal_qmix_predictive_variance_is_constant():
    target = S2Y + 1.0 / (10 / S2Y + 1.0)
    for k in (1, 3, 17, 400, 10_000):
        m = fig_model(k)
        pv = lm.elbo_terms(m, lm.theta_mix_star(m), "invariance_abiding").predictive_variance
        assert abs(pv - target) < 1e-9


def test_prior_predictive_variance():
    assert lm.prior_predictive_variance(fig_model(9)) == pytest.approx(1.0 + S2Y, rel=1e-14)


def test_mean_field_kl_below_data_related_bound():
    bound = data_related_bound(np.ones(10), np.ones(10), S2Y)
    for k in range(1, 201):
        m = fig_model(k)
        assert gs.kl_divergence(lm.q0_posterior(m, lm.theta_0_star(m))[0], m.prior) <= bound


def test_mean_field_gap_asymptote():
    # expansion of (K-1)/2 [ln(1 + a/K) - (a/K)/(1 + a/K)] for a = N sigma0^2 / sigma_y^2
    a = 10 / S2Y
    k = 10_000
    m = fig_model(k)
    gap = lm.invariance_gap_closed_form(m, lm.theta_0_star(m))
    r = a / k
    assert gap == pytest.approx(0.5 * (k - 1) * (math.log1p(r) - r / (1 + r)), rel=1e-10)
    assert gap == pytest.approx(0.7129052921, rel=1e-9)


def test_empty_data_has_no_optimum():
    m = lm.TranslationLinearModel.isotropic(3, np.zeros(0), 1.0)
    with pytest.raises(ValueError):
        lm.theta_mix_star(m)
    assert lm.log_evidence(m) == 0.0
