"""Convergence diagnostics, conditional WAIC, posterior predictive checks and summaries."""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from ._validation import check_random_state
from .data import AbundanceDist
from .exceptions import ConfigError, DataError

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
CHI_SQ_FLOOR = 1e-6


def _chains(draws):
    arr = np.asarray(draws, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim < 2:
        raise ValueError("draws must be (chains, samples, ...)")
    return arr


def rhat(chains):
    """Split-chain potential scale reduction factor.

    ``chains`` is (C, S) or (C, S, ...) for many parameters at once. Each
    chain is halved and R-hat computed over the 2C halves. Parameters whose
    within-chain variance is zero get ``inf`` (with a warning).
    """
    arr = _chains(chains)
    half = arr.shape[1] // 2
    if half < 2:
        return np.full(arr.shape[2:], np.nan)[()] if arr.ndim > 2 else np.nan
    split = np.concatenate([arr[:, :half], arr[:, -half:]], axis=0)
    n = half
    means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(((n - 1) / n * within + between / n) / within)
    zero = within <= 0
    if np.any(zero):
        warnings.warn("zero within-chain variance: R-hat is undefined (returned inf)",
                      RuntimeWarning, stacklevel=2)
        out = np.where(zero, np.inf, out)
    return out[()] if np.ndim(out) == 0 else out


def _autocovariance(x):
    """Autocovariance along axis 1 of centred (C, S, P) draws via FFT."""
    n = x.shape[1]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def ess(chains):
    """Effective sample size with Geyer's initial positive sequence.

    Autocovariances are computed per centred chain and averaged; sums of
    adjacent autocorrelation pairs are accumulated until the first
    non-positive pair. The result is capped at the number of draws. Constant
    chains give ``nan`` (with a warning).
    """
    arr = _chains(chains)
    shape = arr.shape[2:]
    n_chain, n = arr.shape[:2]
    x = arr.reshape(n_chain, n, -1)
    x = x - x.mean(axis=1, keepdims=True)
    acov = _autocovariance(x).mean(axis=0)  # (S, P)
    var0 = acov[0]
    const = var0 <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = acov / var0
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]  # (n_pairs, P)
    positive = pairs > 0
    stop = np.where(positive.all(axis=0), n_pairs, np.argmin(positive, axis=0))
    keep = np.arange(n_pairs)[:, None] < stop[None, :]
    tau = -1.0 + 2.0 * np.where(keep, pairs, 0.0).sum(axis=0)
    total = n_chain * n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.minimum(total / tau, total)
    if np.any(const):
        warnings.warn("constant chain: effective sample size is undefined (returned nan)",
                      RuntimeWarning, stacklevel=2)
        out = np.where(const, np.nan, out)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


class WAICResult(NamedTuple):
    elpd: float
    p_waic: float
    waic: float


def _loglik_matrix(source):
    """Pointwise log-likelihood as (draws, points)."""
    ll = getattr(source, "loglik", source)
    if ll is None:
        raise DataError("no cached log-likelihood to compute WAIC from")
    ll = np.asarray(ll, dtype=np.float64)
    if ll.ndim == 1:
        return ll[:, None]
    if ll.ndim == 2:
        return ll
    if ll.ndim == 4:  # (chains, samples, species, sites)
        return ll.reshape(ll.shape[0] * ll.shape[1], -1)
    if ll.ndim == 3:  # (chains, samples, sites)
        return ll.reshape(ll.shape[0] * ll.shape[1], -1)
    raise ValueError(f"unsupported log-likelihood shape {ll.shape}")


def waic(source):
    """Conditional WAIC from cached per-site log-likelihoods.

    ``source`` is a fit result or an array shaped (draws, sites),
    (chains, draws, sites) or (chains, draws, species, sites). Per point,
    ``lppd = log mean exp(l)`` and ``p = var(l)`` (sample variance, ddof 1);
    ``WAIC = -2 * sum(lppd - p)``.
    """
    ll = _loglik_matrix(source)
    n_draws = ll.shape[0]
    lppd = logsumexp(ll, axis=0) - np.log(n_draws)
    p = ll.var(axis=0, ddof=1) if n_draws > 1 else np.zeros(ll.shape[1])
    elpd = float(np.sum(lppd - p))
    return WAICResult(elpd, float(p.sum()), -2.0 * elpd)


# ---------------------------------------------------------------------------
# posterior predictive checks


class PPCResult(NamedTuple):
    p_value: float
    p_species: np.ndarray
    t_obs: np.ndarray
    t_rep: np.ndarray
    statistic: str
    grouping: str


def _statistic(name):
    key = str(name).replace("-", "").replace("_", "").lower()
    if key == "freemantukey":
        return "freemanTukey", lambda y, e: ((np.sqrt(y) - np.sqrt(e)) ** 2).sum(-1)
    if key == "chisquare":
        return "chiSquare", lambda y, e: ((y - e) ** 2 / (e + CHI_SQ_FLOOR)).sum(-1)
    raise ConfigError(f"unknown ppc statistic {name!r}; expected freemanTukey or chiSquare")


def _grouping(name):
    key = str(name).lower()
    if key not in ("site", "replicate"):
        raise ConfigError(f"unknown ppc grouping {name!r}; expected site or replicate")
    return key


def fitted_eta(fit, d):
    """Linear predictor (species, sites) of flat draw ``d`` including the offset."""
    pb = fit.problem
    s = fit.draws
    eta = s.flat("beta")[d] @ pb.X.T + pb.log_offset
    if pb.single_spatial:
        eta = eta + s.flat("w")[d]
    if pb.factor_model:
        eta = eta + s.flat("lambda")[d] @ s.flat("factors")[d]
    if pb.groups is not None:
        eta = eta + s.flat("re")[d][:, pb.groups]
    return eta


def ppc(fit, statistic, grouping, seed=0):
    """Bayesian p-value: share of draws whose replicated statistic exceeds the observed one.

    Replicates come from the fitted observation model given each draw's
    parameters (and latent N). ``grouping="site"`` sums counts over
    replicates or bands within a site; ``"replicate"`` sums over sites.
    Ties count as not exceeding.
    """
    stat_name, stat = _statistic(statistic)
    grouping = _grouping(grouping)
    pb = fit.problem
    rng = check_random_state(seed)
    n_draws = fit.draws.n_chains * fit.draws.n_samples
    t_obs = np.empty((n_draws, pb.n_species))
    t_rep = np.empty((n_draws, pb.n_species))
    if pb.latent:
        y_obs, mask = pb.obs.observed()
        axis = -1 if grouping == "site" else -2
        N = fit.draws.flat("N")
        alpha = fit.draws.flat("alpha")
        agg_obs = (y_obs * mask).sum(axis)
        for d in range(n_draws):
            probs = pb.obs.probabilities(alpha[d])
            rep, expected = pb.obs.replicate(N[d].astype(np.float64), probs, rng)
            expected = expected * mask
            rep = rep * mask
            e = expected.sum(axis)
            t_obs[d] = stat(agg_obs, e)
            t_rep[d] = stat(rep.sum(axis), e)
    else:
        if grouping == "replicate":
            raise ConfigError("GLMM data have no replicate axis; use grouping='site'")
        y = pb.y
        kappa = fit.draws.flat("kappa") if pb.negbin else None
        tau = np.sqrt(fit.draws.flat("tau_sq")) if pb.gaussian else None
        for d in range(n_draws):
            eta = fitted_eta(fit, d)
            if pb.gaussian:
                mu = eta
                rep = mu + tau[d][:, None] * rng.standard_normal(mu.shape)
            else:
                mu = np.exp(eta)
                if pb.dist is AbundanceDist.NEGBIN:
                    k = kappa[d][:, None]
                    rep = rng.poisson(rng.gamma(k, mu / k)).astype(np.float64)
                else:
                    rep = rng.poisson(mu).astype(np.float64)
            if pb.gaussian and stat_name == "freemanTukey":
                raise ConfigError("Freeman-Tukey needs non-negative data; use chiSquare")
            t_obs[d] = stat(y, mu)
            t_rep[d] = stat(rep, mu)
    p_species = (t_rep > t_obs).mean(axis=0)
    p_value = float((t_rep.sum(1) > t_obs.sum(1)).mean())
    return PPCResult(p_value, p_species, t_obs, t_rep, stat_name, grouping)


# ---------------------------------------------------------------------------
# summaries


def summarize(fit, include_latent=False, blocks=None):
    """Posterior summary table, one row per scalar parameter.

    Columns: mean, sd, type-7 quantiles (2.5, 25, 50, 75, 97.5%), split R-hat
    and ESS. Latent per-site blocks (``w``, ``N``, ``factors``) are skipped
    unless ``include_latent``.
    """
    names = blocks if blocks is not None else fit.parameter_names(include_latent)
    frames = []
    for name in names:
        draws = fit.flat_block(name)
        frames.append(summarize_chains(draws, fit.columns(name)))
    return pd.concat(frames) if frames else summarize_chains(np.zeros((1, 1, 0)), [])


def summarize_chains(draws, labels):
    """Summary table for (chains, samples, params) draws with row ``labels``."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    flat = draws.reshape(-1, draws.shape[2])
    q = np.quantile(flat, QUANTILES, axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r = rhat(draws) if flat.shape[1] else np.zeros(0)
        e = ess(draws) if flat.shape[1] else np.zeros(0)
    sd = flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(flat.shape[1])
    table = {"mean": flat.mean(axis=0), "sd": sd}
    for level, row in zip(QUANTILES, q):
        table[f"q{level * 100:g}"] = row
    table["rhat"] = np.broadcast_to(r, (flat.shape[1],))
    table["ess"] = np.broadcast_to(e, (flat.shape[1],))
    return pd.DataFrame(table, index=pd.Index(list(labels), name="parameter"))
