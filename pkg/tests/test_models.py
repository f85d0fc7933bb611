import warnings

import numpy as np
import pytest
from scipy.special import expit, logsumexp
from scipy.stats import binom, multinomial, poisson
from sklearn.base import clone

from abundfit.data import (ContinuousDesign, CountDesign, DesignMatrix, DistanceDesign,
                           MCMCSettings, ModelSpec, PriorSet, SiteGeometry, validate_spec)
from abundfit.detection import cell_probabilities
from abundfit.diagnostics import ess, waic
from abundfit.exceptions import ConfigError
from abundfit.models import (AbundanceGLMM, DistanceSampling, NMixture, fit_model,
                             hds_site_loglik, nmix_site_loglik)
from abundfit.models._sampler import Problem
from abundfit.simulate import sim_dataset
from helpers import hds_enumeration_tv, nmix_enumeration_tv

CUT = np.array([0.0, 10.0, 20.0, 30.0])


def _mcmc(n_iter, n_burn=None, chains=1, seed=0):
    return MCMCSettings(n_chains=chains, n_iter=n_iter,
                        n_burn=n_iter // 2 if n_burn is None else n_burn, seed=seed)


# ------------------------------------------------------------ site likelihoods


def test_hds_site_loglik_matches_poisson_times_multinomial():
    y = np.array([4, 2, 1])
    cells = cell_probabilities(CUT, 15.0, "HalfNormal", "point")
    probs = np.append(cells.pi, cells.pi_miss)
    for N in (7, 9, 20):
        expected = poisson.logpmf(N, 6.5) + multinomial.logpmf(np.append(y, N - 7), N, probs)
        got = hds_site_loglik(N, y, 6.5, 15.0, CUT, "HalfNormal", "point")
        assert got == pytest.approx(expected, abs=1e-10)
    assert hds_site_loglik(6, y, 6.5, 15.0, CUT, "HalfNormal", "point") == -np.inf


def test_hds_all_detected_uses_observed_cells_only():
    y = np.array([3, 1, 2])
    cells = cell_probabilities(CUT, 12.0, "NegExponential", "line")
    obs_only = multinomial.logpmf(np.append(y, 0), 6, np.append(cells.pi, cells.pi_miss))
    expected = poisson.logpmf(6, 3.0) + obs_only
    assert hds_site_loglik(6, y, 3.0, 12.0, CUT, "NegExponential", "line") == pytest.approx(expected)
    direct = np.log(720 / (6 * 1 * 2)) + (y * np.log(cells.pi)).sum()
    assert obs_only == pytest.approx(direct)


def test_nmix_site_loglik_matches_scipy():
    y = np.array([3, 5, 2])
    p = np.array([0.3, 0.6, 0.45])
    for N in (5, 8, 30):
        expected = poisson.logpmf(N, 7.0) + binom.logpmf(y, N, p).sum()
        assert nmix_site_loglik(N, y, 7.0, p) == pytest.approx(expected, abs=1e-10)
    assert nmix_site_loglik(4, y, 7.0, p) == -np.inf
    masked = nmix_site_loglik(6, y, 7.0, p, observed=[True, True, False])
    assert masked == pytest.approx(poisson.logpmf(6, 7.0) + binom.logpmf(y[:2], 6, p[:2]).sum())


def test_nmix_perfect_detection_observation_term_vanishes():
    assert nmix_site_loglik(4, [4, 4], 3.0, 1.0) == pytest.approx(poisson.logpmf(4, 3.0))


def test_nmix_zero_counts_with_near_certain_detection_pin_n_at_zero():
    support = np.arange(0, 50)
    logp = np.array([nmix_site_loglik(n, [0, 0, 0], 5.0, 0.999) for n in support])
    assert np.exp(logp[0] - logsumexp(logp)) > 0.999
    assert nmix_enumeration_tv(y=(0, 0, 0), mu=5.0, p=0.999, n_draws=20_000, n_copies=500) < 0.02


def test_sampler_site_loglik_matches_scalar_functions():
    sim = sim_dataset("DS", n_sites=6, seed=2)
    spec = sim.spec
    pb = Problem(spec, sim.data, sim.geometry)
    alpha = np.array([[np.log(18.0)]])
    cells = pb.obs.probabilities(alpha)
    N = pb.obs.lower + 2
    ll = pb.obs.site_loglik(N.astype(float), cells)[0]
    for j in range(6):
        full = hds_site_loglik(N[0, j], sim.data.counts[j], 1.0, 18.0, pb.obs.cutpoints,
                               spec.detection_fn, spec.survey_type)
        assert ll[j] == pytest.approx(full - poisson.logpmf(N[0, j], 1.0), abs=1e-9)

    sim = sim_dataset("NMix", n_sites=6, seed=3)
    pb = Problem(sim.spec, sim.data, sim.geometry)
    p = pb.obs.probabilities(np.array([[0.3]]))
    N = pb.obs.lower + 1
    ll = pb.obs.site_loglik(N.astype(float), p)[0]
    for j in range(6):
        full = nmix_site_loglik(N[0, j], sim.data.counts[j], 1.0, p[0, j])
        assert ll[j] == pytest.approx(full - poisson.logpmf(N[0, j], 1.0), abs=1e-9)


# --------------------------------------------------- enumeration of N posteriors


def test_hds_single_band_enumeration():
    tv = hds_enumeration_tv(y=(1,), mu=1.0, sigma=30.0, cutpoints=(0, 50))
    assert tv < 0.02


def test_nmix_two_survey_enumeration():
    assert nmix_enumeration_tv(y=(1, 0), mu=2.0, p=0.5) < 0.02


@pytest.mark.parametrize("exact", [True, False], ids=["summed-out-draw", "random-walk-only"])
def test_negative_binomial_enumeration(exact):
    assert hds_enumeration_tv(dist="NegBinomial", kappa=1.5, survey="point",
                              fn="NegExponential", exact=exact) < 0.02
    assert nmix_enumeration_tv(dist="NegBinomial", kappa=0.7, exact=exact) < 0.02


# ---------------------------------------------------------------- HDS fitting


def _perfect_detection_data(seed, n_sites=50):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_sites)
    N = rng.poisson(np.exp(1.0 + 0.4 * x))
    cut = np.linspace(0.0, 1.0, 6)
    y = np.array([rng.multinomial(n, np.full(5, 0.2)) for n in N])
    covs = DesignMatrix(x[:, None], ("x",), standardize=False)
    return DistanceDesign(y, cut, "line", covs), ContinuousDesign(N.astype(float), covs)


@pytest.mark.slow
def test_perfect_detection_matches_glmm_on_totals():
    for seed in range(5):
        hds_data, glmm_data = _perfect_detection_data(seed)
        hds = fit_model(hds_data, None, ModelSpec("HDS", detection_fn="HalfNormal",
                                                  cutpoints=hds_data.cutpoints,
                                                  survey_type="line", mcmc=_mcmc(3000)))
        glm = fit_model(glmm_data, None, ModelSpec("GLMM", mcmc=_mcmc(3000)))
        a = np.quantile(hds.draws.flat("beta")[:, 0], [0.025, 0.975], axis=0)
        b = np.quantile(glm.draws.flat("beta")[:, 0], [0.025, 0.975], axis=0)
        assert np.all(a[0] <= b[1]) and np.all(b[0] <= a[1])


def test_covariate_free_perfect_detection_recovers_mean_total():
    rng = np.random.default_rng(17)
    N = rng.poisson(6.0, 80)
    y = np.array([rng.multinomial(n, np.full(5, 0.2)) for n in N])
    data = DistanceDesign(y, np.linspace(0.0, 1.0, 6), "line")
    fit = fit_model(data, None, ModelSpec("HDS", detection_fn="HalfNormal",
                                          cutpoints=data.cutpoints, survey_type="line",
                                          mcmc=_mcmc(3000)))
    mu = np.exp(fit.draws.flat("beta")[:, 0, 0])
    assert mu.mean() == pytest.approx(N.mean(), rel=0.1)


def test_latent_bounds_and_species_covariance_hold_in_every_draw():
    sim = sim_dataset("sfMsDS", n_sites=40, seed=4, factor_count=2)
    fit = fit_model(sim.data, sim.geometry, sim.spec.replace(mcmc=_mcmc(300)))
    N = fit.draws.flat("N")
    assert np.all(N >= fit.problem.obs.lower[None])
    cov = fit.species_covariance()
    assert np.linalg.eigvalsh(cov).min() >= -1e-10
    lam = fit.draws.flat("lambda")
    assert np.all(lam[:, 0, 0] == 1.0) and np.all(lam[:, 1, 1] == 1.0)
    assert np.all(lam[:, 0, 1] == 0.0)


def test_spatial_factor_without_spatial_is_invalid():
    spec = ModelSpec("HDS", detection_fn="HalfNormal", species_correlation="spatialFactor")
    assert any(d.level == "error" for d in validate_spec(spec))


@pytest.mark.slow
def test_single_factor_single_species_matches_spatial_model():
    sim = sim_dataset("spDS", n_sites=60, seed=5)
    base = sim.spec.replace(mcmc=_mcmc(3000, chains=2))
    a = fit_model(sim.data, sim.geometry, base)
    b = fit_model(sim.data, sim.geometry,
                  base.replace(species_correlation="spatialFactor", factor_count=1))
    wa, wb = waic(a), waic(b)

    def pointwise(fit):
        ll = fit.loglik.reshape(-1, fit.loglik.shape[-1])
        return -2 * (logsumexp(ll, 0) - np.log(ll.shape[0]) - ll.var(0, ddof=1))

    diff = pointwise(a) - pointwise(b)
    se = np.sqrt(diff.size * diff.var(ddof=1))
    assert abs(wa.waic - wb.waic) < 2 * se + 1.0


def test_hds_prediction_offset_scaling_and_intercept_transform():
    sim = sim_dataset("DS", n_sites=40, seed=6)
    est = DistanceSampling(n_iter=400, n_burn=200).fit(sim.data, sim.geometry)
    x = np.zeros((3, 1))
    one = est.predict(abund_covs=x, seed=1)
    two = est.predict(abund_covs=x, offset=np.full(3, 2.0), seed=1)
    np.testing.assert_allclose(two.mu, 2 * one.mu, rtol=1e-14)
    assert two.response.mean() == pytest.approx(2 * one.response.mean(), rel=0.1)
    beta = est.fit_.draws.flat("beta")
    np.testing.assert_allclose(one.mu[:, 0, :], np.exp(beta[:, 0, :1]) * np.ones(3), rtol=1e-14)
    sigma, p_det = est.predict_detection()
    np.testing.assert_allclose(sigma[:, 0, 0], np.exp(est.fit_.draws.flat("alpha")[:, 0, 0]))
    assert np.all((p_det > 0) & (p_det < 1))


# ------------------------------------------------------------- N-mixture fits


def test_nmix_detection_predictions():
    sim = sim_dataset("NMix", n_sites=40, seed=7, alpha=[0.0, 0.8])
    est = NMixture(n_iter=400, n_burn=200).fit(sim.data, sim.geometry)
    alpha = est.fit_.draws.flat("alpha")[:, 0, :]
    p0 = est.predict_detection(np.zeros((1, 1)))
    np.testing.assert_allclose(p0[:, 0, 0], expit(alpha[:, 0]), rtol=1e-14)
    grid = np.linspace(-2, 2, 9)[:, None]
    p = est.predict_detection(grid)[:, 0, :]
    positive = alpha[:, 1] > 0
    assert np.all(np.diff(p[positive], axis=1) > 0)
    assert np.all(np.diff(p[~positive], axis=1) <= 0)


def test_unreplicated_counts_fail_before_fitting():
    with pytest.raises(Exception, match="no replicated site"):
        NMixture().fit(CountDesign(np.full((5, 1), 3.0)))


def test_spatial_prediction_variance_grows_away_from_data():
    sim = sim_dataset("spNMix", n_sites=60, seed=8, beta=[1.0])
    fit = fit_model(sim.data, sim.geometry, sim.spec.replace(mcmc=_mcmc(1000)))
    train = sim.geometry.coords[:20]
    far = train + 10.0
    from abundfit.models import nmix_predict
    near_var = np.log(nmix_predict(fit, train, seed=1).mu).var(0)
    far_var = np.log(nmix_predict(fit, far, seed=1).mu).var(0)
    assert np.all(far_var >= near_var)


@pytest.mark.slow
def test_nmix_posterior_matches_grid_with_n_summed_out():
    # High detection and many replicates keep the abundance/detection ridge
    # (counts tending to iid Poisson) far below the peak, so truncating N at
    # 200 in the grid leaves the posterior unchanged.
    rng = np.random.default_rng(9)
    N = rng.poisson(15, 5)
    y = rng.binomial(N[:, None], 0.85, size=(5, 10)).astype(float)
    b0 = np.linspace(0.0, 6.0, 301)
    a0 = np.linspace(-2.0, 6.0, 301)
    support = np.arange(0, 201)
    lp = np.zeros((b0.size, a0.size))
    log_pois = poisson.logpmf(support[None, :], np.exp(b0)[:, None])  # (B, N)
    for j in range(5):
        log_binom = binom.logpmf(y[j][None, None, :], support[None, :, None],
                                 expit(a0)[:, None, None]).sum(-1)  # (A, N)
        lp += logsumexp(log_pois[:, None, :] + log_binom[None, :, :], axis=-1)
    lp += -0.5 * b0[:, None] ** 2 / 100 - 0.5 * a0[None, :] ** 2 / 100
    w = np.exp(lp - lp.max())
    w /= w.sum()
    edge = w[0].sum() + w[-1].sum() + w[:, 0].sum() + w[:, -1].sum()
    assert edge < 1e-8
    grid_mean = np.array([(w.sum(1) * b0).sum(), (w.sum(0) * a0).sum()])
    grid_sd = np.sqrt(np.array([(w.sum(1) * b0 ** 2).sum(), (w.sum(0) * a0 ** 2).sum()])
                      - grid_mean ** 2)

    fit = fit_model(CountDesign(y), None, ModelSpec("NMIX", mcmc=_mcmc(8000, 2000, chains=2)))
    draws = np.column_stack([fit.draws.flat("beta")[:, 0, 0], fit.draws.flat("alpha")[:, 0, 0]])
    np.testing.assert_allclose(draws.mean(0), grid_mean, rtol=0.05)
    np.testing.assert_allclose(draws.std(0), grid_sd, rtol=0.05)
    assert fit.draws.flat("N").max() <= 200


# ------------------------------------------------------------------- GLMMs


def test_gaussian_glmm_matches_conjugate_posterior_mean():
    rng = np.random.default_rng(10)
    x = rng.standard_normal(50)
    yv = 1.0 + 0.5 * x + 0.7 * rng.standard_normal(50)
    X = np.column_stack([np.ones(50), x])
    data = ContinuousDesign(yv, DesignMatrix(x[:, None], ("x",), standardize=False))
    fit = fit_model(data, None, ModelSpec("GLMM", abundance_dist="Gaussian",
                                          mcmc=_mcmc(10_000, 1000, chains=2)))
    beta = fit.draws.samples["beta"][:, :, 0, :]
    tau = fit.draws.flat("tau_sq")[:, 0].mean()
    V = np.linalg.inv(X.T @ X / tau + np.eye(2) / 100)
    mean = V @ X.T @ yv / tau
    se = beta.reshape(-1, 2).std(0) / np.sqrt(ess(beta))
    assert np.all(np.abs(beta.reshape(-1, 2).mean(0) - mean) < 3 * se)


@pytest.mark.slow
def test_exact_neighbor_set_matches_dense_gp_gibbs():
    sim = sim_dataset("spAbund", n_sites=40, seed=11, abundance_dist="Gaussian", phi=3.0,
                      neighbor_count=39, dense=True)
    phi = 3.0
    spec = sim.spec.replace(priors=PriorSet(phi_bounds=(phi, phi * (1 + 1e-9))),
                            mcmc=_mcmc(20_000, 2000))
    fit = fit_model(sim.data, sim.geometry, spec)
    ours = fit.draws.samples["beta"][:, :, 0, :]

    # dense-covariance Gibbs oracle for the same model
    rng = np.random.default_rng(0)
    X = sim.data.abund_covs.values
    yv = sim.data.response
    J = len(yv)
    d = np.sqrt(((sim.geometry.coords[:, None] - sim.geometry.coords[None]) ** 2).sum(-1))
    Rinv = np.linalg.inv(np.exp(-phi * d))
    pr = PriorSet()
    beta, w, s2, t2 = np.zeros(2), np.zeros(J), 1.0, 1.0
    keep = []
    for it in range(20_000):
        Q = Rinv / s2 + np.eye(J) / t2
        L = np.linalg.cholesky(Q)
        m = np.linalg.solve(Q, (yv - X @ beta) / t2)
        w = m + np.linalg.solve(L.T, rng.standard_normal(J))
        Qb = X.T @ X / t2 + np.eye(2) / pr.coef_var
        Lb = np.linalg.cholesky(Qb)
        mb = np.linalg.solve(Qb, X.T @ (yv - w) / t2)
        beta = mb + np.linalg.solve(Lb.T, rng.standard_normal(2))
        s2 = 1 / rng.gamma(pr.sigma_sq_shape + J / 2, 1 / (pr.sigma_sq_rate + 0.5 * w @ Rinv @ w))
        r = yv - X @ beta - w
        t2 = 1 / rng.gamma(pr.resid_var_shape + J / 2, 1 / (pr.resid_var_rate + 0.5 * r @ r))
        if it >= 2000:
            keep.append(beta)
    oracle = np.array(keep)[None]
    se = np.sqrt(ours.reshape(-1, 2).var(0) / ess(ours) + oracle[0].var(0) / ess(oracle))
    assert np.all(np.abs(ours.reshape(-1, 2).mean(0) - oracle[0].mean(0)) < 3 * se)


def test_single_group_random_intercept_warns():
    data = ContinuousDesign(np.arange(10.0), groups=np.zeros(10, dtype=int))
    diags = validate_spec(ModelSpec("GLMM"), data)
    assert any(d.level == "warning" and "single group" in d.message for d in diags)


def _fixed_fit(fit, n_draws, **values):
    """Replace stored draws by ``n_draws`` copies of fixed values."""
    for name, value in values.items():
        shape = fit.draws.samples[name].shape[2:]
        fit.draws.samples[name] = np.broadcast_to(np.asarray(value, float),
                                                  (1, n_draws) + shape).copy()
    fit.draws.loglik = np.zeros((1, n_draws) + fit.draws.loglik.shape[2:])
    return fit


def test_gaussian_zero_residual_variance_predicts_the_mean():
    sim = sim_dataset("abund", n_sites=30, seed=12, abundance_dist="Gaussian")
    fit = fit_model(sim.data, sim.geometry, sim.spec.replace(mcmc=_mcmc(200)))
    fit.draws.samples["tau_sq"][:] = 0.0
    from abundfit.models import glmm_predict
    pred = glmm_predict(fit, new_covs=np.linspace(-1, 1, 5)[:, None])
    np.testing.assert_array_equal(pred.response, pred.mu)


def test_negative_binomial_with_huge_kappa_is_poisson_like():
    sim = sim_dataset("abund", n_sites=30, seed=13, abundance_dist="NegBinomial", beta=[1.5])
    fit = fit_model(sim.data, sim.geometry, sim.spec.replace(mcmc=_mcmc(20)))
    fit = _fixed_fit(fit, 100_000, beta=[[1.5]], kappa=[1e8])
    from abundfit.models import glmm_predict
    y = glmm_predict(fit, new_covs=np.zeros((1, 0)), seed=2).response[:, 0, 0]
    assert y.var() == pytest.approx(np.exp(1.5), rel=0.1)
    assert y.mean() == pytest.approx(np.exp(1.5), rel=0.02)


def test_spatial_gaussian_prediction_at_training_site_interpolates():
    sim = sim_dataset("spAbund", n_sites=50, seed=14, abundance_dist="Gaussian", tau_sq=0.05)
    fit = fit_model(sim.data, sim.geometry, sim.spec.replace(mcmc=_mcmc(2000)))
    from abundfit.models import glmm_predict
    x = sim.data.abund_covs.raw[:10]
    pred = glmm_predict(fit, sim.geometry.coords[:10], x, seed=3)
    fitted = (fit.draws.flat("beta")[:, 0] @ sim.data.abund_covs.values[:10].T
              + fit.draws.flat("w")[:, :10])
    np.testing.assert_allclose(pred.mu[:, 0].mean(0), fitted.mean(0), atol=0.05)


def test_unseen_group_gets_fresh_random_intercept():
    sim = sim_dataset("abund", n_sites=60, seed=15, n_groups=4, re_var=0.5)
    fit = fit_model(sim.data, sim.geometry, sim.spec.replace(mcmc=_mcmc(400)))
    from abundfit.models import glmm_predict
    x = np.zeros((2, 1))
    pred = glmm_predict(fit, new_covs=x, groups=[fit.problem.group_labels[0], "new"], seed=4)
    known = np.log(pred.mu[:, 0, 0])
    beta = fit.draws.flat("beta")[:, 0, 0]
    np.testing.assert_allclose(known, beta + fit.draws.flat("re")[:, 0, 0], rtol=1e-12)
    assert np.log(pred.mu[:, 0, 1]).var() > beta.var()


# ------------------------------------------------------------ estimator API


def test_estimators_follow_the_sklearn_parameter_protocol():
    est = NMixture(n_iter=123, seed=7)
    params = est.get_params()
    assert params["n_iter"] == 123 and params["seed"] == 7
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(n_burn=10)
    assert est.n_burn == 10
    for cls in (DistanceSampling, NMixture, AbundanceGLMM):
        with pytest.raises(ConfigError, match="not fitted"):
            cls().predict(np.zeros((1, 2)))


def test_estimator_fit_is_deterministic_given_seed():
    sim = sim_dataset("abund", n_sites=30, seed=16)
    a = AbundanceGLMM(n_iter=200, n_burn=100, seed=3).fit(sim.data, sim.geometry)
    b = AbundanceGLMM(n_iter=200, n_burn=100, seed=3).fit(sim.data, sim.geometry)
    np.testing.assert_array_equal(a.fit_.draws.samples["beta"], b.fit_.draws.samples["beta"])
    table = a.summary()
    assert list(table.index) == ["beta[(Intercept)]", "beta[x1]"]
