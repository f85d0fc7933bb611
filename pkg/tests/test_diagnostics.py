import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from abundfit.data import CountDesign, MCMCSettings, ModelSpec, SiteGeometry
from abundfit.diagnostics import ess, ppc, rhat, summarize, summarize_chains, waic
from abundfit.exceptions import ConfigError, DataError
from abundfit.models import fit_model
from abundfit.simulate import sim_dataset


def _ar1(rho, shape, rng):
    x = np.empty(shape)
    x[..., 0] = rng.standard_normal(shape[:-1])
    scale = np.sqrt(1 - rho ** 2)
    eps = rng.standard_normal(shape)
    for t in range(1, shape[-1]):
        x[..., t] = rho * x[..., t - 1] + scale * eps[..., t]
    return x


def test_rhat_constant_chains_give_infinity():
    with pytest.warns(RuntimeWarning):
        assert rhat(np.full((3, 100), 2.0)) == np.inf


def test_rhat_iid_chains_near_one():
    r = rhat(np.random.default_rng(0).standard_normal((4, 1000)))
    assert 0.99 <= r <= 1.02


def test_rhat_detects_separated_chains():
    rng = np.random.default_rng(1)
    chains = np.array([[10.0], [-10.0]]) + 1e-3 * rng.standard_normal((2, 500))
    assert rhat(chains) > 3


def test_rhat_vectorizes_over_parameters():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 200, 3))
    np.testing.assert_allclose(rhat(x), [rhat(x[..., k]) for k in range(3)])


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.1, 100), b=st.floats(-100, 100), seed=st.integers(0, 1000))
def test_rhat_is_affine_invariant(a, b, seed):
    x = np.random.default_rng(seed).standard_normal((3, 60))
    assert rhat(a * x + b) == pytest.approx(rhat(x), rel=1e-9)


def test_ess_iid_draws():
    e = ess(np.random.default_rng(3).standard_normal((4, 1000)))
    assert 3200 <= e <= 4800


def test_ess_ar1_matches_analytic():
    rho = 0.9
    x = _ar1(rho, (4, 5000), np.random.default_rng(4))
    analytic = x.size * (1 - rho) / (1 + rho)
    assert analytic / 1.5 <= ess(x) <= analytic * 1.5


def test_ess_constant_chain_is_nan():
    with pytest.warns(RuntimeWarning):
        assert np.isnan(ess(np.ones((2, 50))))


def test_ess_never_exceeds_draw_count():
    # antithetic chain: negative lag-1 correlation would push ESS above the draw count
    x = np.tile([1.0, -1.0], 500)[None] + 0.01 * np.random.default_rng(5).standard_normal((1, 1000))
    assert ess(x) <= 1000


def test_waic_zero_variance_single_site():
    r = waic(np.full((10, 1), np.log(0.5)))
    assert r.p_waic == 0.0
    assert r.waic == pytest.approx(1.3862943611198906, abs=1e-12)


def test_waic_hand_built_cache():
    ll = np.array([[-1.0, -2.0], [-1.5, -2.5], [-0.5, -3.0]])
    lppd = np.log(np.exp(ll).mean(0))
    p = ll.var(0, ddof=1)
    expected = -2 * np.sum(lppd - p)
    r = waic(ll)
    assert r.waic == pytest.approx(expected, abs=1e-10)
    assert r.elpd == pytest.approx(np.sum(lppd - p), abs=1e-10)
    assert r.p_waic == pytest.approx(p.sum(), abs=1e-10)


def test_waic_constant_shift_identity():
    ll = np.random.default_rng(6).normal(-2, 0.3, size=(200, 7))
    c = 0.75
    assert waic(ll + c).waic - waic(ll).waic == pytest.approx(-2 * 7 * c, abs=1e-10)


def test_waic_chain_layout_invariance():
    ll = np.random.default_rng(7).normal(-2, 0.5, size=(4, 50, 2, 6))
    base = waic(ll).waic
    assert waic(ll[::-1]).waic == pytest.approx(base, abs=1e-10)
    assert waic(ll.reshape(2, 100, 2, 6)).waic == pytest.approx(base, abs=1e-10)
    assert waic(ll.reshape(200, 12)).waic == pytest.approx(base, abs=1e-10)


def test_waic_without_cache_is_a_data_error():
    class NoCache:
        loglik = None
    with pytest.raises(DataError):
        waic(NoCache())


def _degenerate_nmix_fit():
    counts = np.repeat(np.array([2.0, 0.0, 5.0, 1.0, 3.0])[:, None], 3, axis=1)
    fit = fit_model(CountDesign(counts), None, ModelSpec("NMIX", mcmc=MCMCSettings(n_iter=40, n_burn=20)))
    fit.draws.samples["alpha"][:] = 50.0  # expit(50) == 1.0 in double precision
    fit.draws.samples["N"][:] = fit.problem.obs.lower
    return fit


@pytest.mark.parametrize("statistic", ["freemanTukey", "chiSquare"])
@pytest.mark.parametrize("grouping", ["site", "replicate"])
def test_ppc_ties_count_as_not_exceeding(statistic, grouping):
    res = ppc(_degenerate_nmix_fit(), statistic, grouping)
    np.testing.assert_array_equal(res.t_rep, res.t_obs)
    assert res.p_value == 0.0


def test_ppc_rejects_unknown_options_and_bad_combinations():
    fit = _degenerate_nmix_fit()
    with pytest.raises(ConfigError):
        ppc(fit, "deviance", "site")
    with pytest.raises(ConfigError):
        ppc(fit, "chiSquare", "band")
    sim = sim_dataset("abund", n_sites=20, seed=1, abundance_dist="Gaussian")
    g = fit_model(sim.data, sim.geometry, sim.spec.replace(mcmc=MCMCSettings(n_iter=40, n_burn=20)))
    with pytest.raises(ConfigError):
        ppc(g, "chiSquare", "replicate")
    with pytest.raises(ConfigError):
        ppc(g, "freemanTukey", "site")
    assert 0.0 <= ppc(g, "chiSquare", "site").p_value <= 1.0


def test_ppc_is_invariant_to_site_labels():
    sim = sim_dataset("NMix", n_sites=25, seed=2)
    spec = sim.spec.replace(mcmc=MCMCSettings(n_iter=200, n_burn=100))
    a = fit_model(sim.data, sim.geometry, spec)
    relabeled = SiteGeometry(sim.geometry.coords, ids=tuple(f"z{j}" for j in range(25)))
    b = fit_model(sim.data, relabeled, spec)
    for grouping in ("site", "replicate"):
        assert ppc(a, "freemanTukey", grouping, seed=3).p_value == \
            ppc(b, "freemanTukey", grouping, seed=3).p_value


def test_ppc_statistics_by_hand():
    fit = _degenerate_nmix_fit()
    fit.draws.samples["alpha"][:] = 0.0  # p = 1/2, expected count N/2 per survey
    res = ppc(fit, "chiSquare", "site", seed=0)
    y = fit.problem.obs.y[0].sum(-1)
    e = 3 * fit.problem.obs.lower[0] / 2
    np.testing.assert_allclose(res.t_obs[0, 0], ((y - e) ** 2 / (e + 1e-6)).sum())
    res = ppc(fit, "freemanTukey", "replicate", seed=0)
    yr = fit.problem.obs.y[0].sum(0)
    er = np.full(3, fit.problem.obs.lower[0].sum() / 2)
    np.testing.assert_allclose(res.t_obs[0, 0], ((np.sqrt(yr) - np.sqrt(er)) ** 2).sum())


def test_summary_of_four_draws():
    table = summarize_chains(np.array([[1.0, 2.0, 3.0, 4.0]]), ["x"])
    assert table.loc["x", "mean"] == 2.5
    assert table.loc["x", "q50"] == 2.5


def _type7(x, q):
    x = np.sort(x)
    h = (len(x) - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e6, 1e6)))
def test_summary_quantiles_are_type7_and_monotone(x):
    row = summarize_chains(x[None, :], ["p"]).loc["p"]
    qs = [row[c] for c in ("q2.5", "q25", "q50", "q75", "q97.5")]
    assert all(a <= b for a, b in zip(qs, qs[1:]))
    for col, q in zip(("q2.5", "q25", "q50", "q75", "q97.5"), (0.025, 0.25, 0.5, 0.75, 0.975)):
        assert row[col] == pytest.approx(_type7(x, q), abs=1e-12, rel=1e-12)


def test_summarize_fit_columns_and_latent_toggle():
    sim = sim_dataset("NMix", n_sites=10, seed=4)
    fit = fit_model(sim.data, sim.geometry,
                    sim.spec.replace(mcmc=MCMCSettings(n_chains=2, n_iter=100, n_burn=50)))
    table = summarize(fit)
    assert list(table.columns) == ["mean", "sd", "q2.5", "q25", "q50", "q75", "q97.5", "rhat", "ess"]
    assert "beta[(Intercept)]" in table.index and "alpha[(Intercept)]" in table.index
    assert not any(i.startswith("N[") for i in table.index)
    assert sum(i.startswith("N[") for i in summarize(fit, include_latent=True).index) == 10
