"""Fit results, posterior prediction and the shared estimator base class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .. import _kernels
from ..data import (MCMCSettings, ModelSpec, PriorSet, SiteGeometry, as_stack,
                    raise_for_errors, validate_spec)
from ..exceptions import ConfigError, DataError, NumericalError
from ..mcmc import run_chains
from ..spatial import correlation, nearest_sites
from .._validation import check_random_state
from ._sampler import AbundanceSampler, Problem

# blocks describing latent per-site state rather than model parameters
LATENT_BLOCKS = ("w", "N", "factors")


@dataclass(eq=False)
class FitResult:
    """Posterior draws of one fit plus everything needed to post-process them."""

    spec: ModelSpec
    draws: object
    problem: Problem

    @property
    def geometry(self):
        return self.problem.geometry

    @property
    def species(self):
        return self.problem.species

    @property
    def loglik(self):
        """Cached conditional log-likelihood, shape (chains, samples, species, sites)."""
        return self.draws.loglik

    def axis_labels(self, name):
        """Labels for each non-draw axis of a parameter block."""
        pb = self.problem
        species = list(pb.species)
        sites = list(pb.geometry.ids) if pb.geometry is not None else [
            str(j + 1) for j in range(pb.n_sites)]
        coef = list(pb.coef_names)
        factors = [f"f{l + 1}" for l in range(pb.q)]
        det = list(pb.obs.det_names) if pb.obs is not None else []
        table = {
            "beta": [species, coef], "alpha": [species, det],
            "beta_comm_mean": [coef], "beta_comm_var": [coef],
            "alpha_comm_mean": [det], "alpha_comm_var": [det],
            "kappa": [species], "tau_sq": [species], "re_var": [species],
            "re": [species, list(getattr(pb, "group_labels", ()))],
            "N": [species, sites], "w": [sites], "factors": [factors, sites],
            "lambda": [species, factors],
            "phi": [factors] if pb.factor_model else [],
            "nu": [factors] if pb.factor_model else [],
            "sigma_sq": [],
        }
        labels = table.get(name)
        shape = self.draws.samples[name].shape[2:]
        if labels is None or len(labels) != len(shape):
            labels = [[str(k) for k in range(n)] for n in shape]
        # single-species fits drop the species axis from labels
        if pb.n_species == 1 and labels and labels[0] == species and len(labels) > 1:
            return [None] + labels[1:]
        return labels

    def columns(self, name):
        """Flat column labels like ``beta[(Intercept)]`` for one block."""
        labels = self.axis_labels(name)
        if not labels:
            return [name]
        grids = np.meshgrid(*[np.arange(len(l)) if l is not None else np.arange(1)
                              for l in labels], indexing="ij")
        out = []
        for idx in zip(*(g.ravel() for g in grids)):
            parts = [labels[a][k] for a, k in enumerate(idx) if labels[a] is not None]
            out.append(f"{name}[{','.join(parts)}]")
        return out

    def flat_block(self, name):
        """Draws of a block reshaped to (chains, samples, columns)."""
        arr = self.draws.samples[name]
        return arr.reshape(arr.shape[:2] + (-1,)).astype(np.float64)

    def parameter_names(self, include_latent=False):
        return [n for n in self.draws.samples
                if include_latent or n not in LATENT_BLOCKS]

    def species_covariance(self):
        """Draws of the residual species covariance ``Lambda Lambda'``."""
        lam = self.draws.flat("lambda")
        return np.einsum("dil,dkl->dik", lam, lam)


@dataclass(eq=False)
class Prediction:
    """Posterior predictive draws at new sites; arrays are (draws, species, sites)."""

    mu: np.ndarray
    response: np.ndarray
    response_name: str
    species: tuple

    def summary(self):
        """Per-site summaries as a long DataFrame (see :func:`summarize_draws`)."""
        import pandas as pd

        frames = []
        for name, arr in (("mu", self.mu), (self.response_name, self.response)):
            for i, sp in enumerate(self.species):
                stats = summarize_draws(arr[:, i, :])
                stats.insert(0, "quantity", name)
                stats.insert(0, "species", sp)
                stats.insert(0, "site", np.arange(1, arr.shape[2] + 1))
                frames.append(stats)
        return pd.concat(frames, ignore_index=True)


def summarize_draws(draws):
    """Mean, sd, 2.5/50/97.5% quantiles and CI width per column of (D, n) draws."""
    import pandas as pd

    draws = np.asarray(draws, dtype=np.float64)
    q = np.quantile(draws, [0.025, 0.5, 0.975], axis=0)
    sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1])
    return pd.DataFrame({"mean": draws.mean(axis=0), "sd": sd, "q2.5": q[0], "q50": q[1],
                         "q97.5": q[2], "ci_width": q[2] - q[0]})


def _krige_field(new_coords, coords, w, sigma_sq, phi, nu, model, m, rng):
    """Draw a field at new sites, one kriging solve per posterior draw.

    ``w`` is (D, J); ``sigma_sq``, ``phi`` and ``nu`` are (D,) arrays.
    """
    nn = nearest_sites(coords, new_coords, m)
    xy = coords[nn]
    d0 = np.sqrt(((xy - new_coords[:, None, :]) ** 2).sum(-1))
    dnn = np.sqrt(((xy[:, :, None, :] - xy[:, None, :, :]) ** 2).sum(-1))
    counts = np.full(nn.shape[0], nn.shape[1], dtype=np.int64)
    out = np.empty((w.shape[0], new_coords.shape[0]))
    z = rng.standard_normal(out.shape)
    for d in range(w.shape[0]):
        nu_d = None if nu is None else nu[d]
        c0 = correlation(d0, phi[d], model, nu_d)
        weights, bad = _kernels.batched_cholesky_solve(correlation(dnn, phi[d], model, nu_d),
                                                       c0, counts)
        if bad >= 0:
            raise NumericalError("neighbor covariance is not positive definite", site=int(bad))
        var = sigma_sq[d] * np.maximum(1.0 - (weights * c0).sum(1), 0.0)
        out[d] = (weights * w[d][nn]).sum(1) + np.sqrt(var) * z[d]
    return out


def predict_abundance(fit, coords=None, abund_covs=None, offset=None, groups=None, seed=0,
                      max_draws=None):
    """Posterior predictive draws of the mean and abundance (or response) at new sites.

    Covariates are raw values, standardized here with the training moments.
    Spatial fields are kriged from each draw's field and covariance
    parameters; factor models krige each factor; unseen random-effect groups
    get fresh intercepts from that draw's variance.
    """
    pb = fit.problem
    rng = check_random_state(seed)
    design = pb.stack.first.abund_covs
    if abund_covs is None:
        if design.names:
            raise DataError(f"abundance covariates {design.names} are required for prediction")
        n_new = None if coords is None else np.asarray(coords).reshape(-1, 2).shape[0]
        if n_new is None:
            raise DataError("need new coordinates or covariates to size the prediction")
        abund_covs = np.zeros((n_new, 0))
    X0 = design.transform(abund_covs)
    n_new = X0.shape[0]
    if n_new == 0:
        raise DataError("no new sites to predict at")
    beta = fit.draws.flat("beta")
    n_draws = beta.shape[0]
    keep = np.arange(n_draws)
    if max_draws is not None and max_draws < n_draws:
        keep = np.linspace(0, n_draws - 1, max_draws).round().astype(np.int64)
    beta = beta[keep]
    eta = np.einsum("dip,jp->dij", beta, X0)

    spec = fit.spec
    if pb.spec.spatial:
        if coords is None:
            raise DataError("spatial models need coordinates of the new sites")
        new_xy = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        if new_xy.shape[0] != n_new:
            raise DataError("coordinates and covariates describe different numbers of sites")
        train_xy = pb.geometry.coords
    if pb.single_spatial:
        nu = fit.draws.flat("nu")[keep] if pb.matern else None
        w0 = _krige_field(new_xy, train_xy, fit.draws.flat("w")[keep],
                          fit.draws.flat("sigma_sq")[keep], fit.draws.flat("phi")[keep], nu,
                          spec.cov_model, spec.neighbor_count, rng)
        eta += w0[:, None, :]
    if pb.factor_model:
        lam = fit.draws.flat("lambda")[keep]
        fac = np.empty((len(keep), pb.q, n_new))
        if pb.spec.spatial:
            train = fit.draws.flat("factors")[keep]
            phi = fit.draws.flat("phi")[keep]
            nu = fit.draws.flat("nu")[keep] if pb.matern else None
            for l in range(pb.q):
                fac[:, l] = _krige_field(new_xy, train_xy, train[:, l], np.ones(len(keep)),
                                         phi[:, l], None if nu is None else nu[:, l],
                                         spec.cov_model, spec.neighbor_count, rng)
        else:
            fac[:] = rng.standard_normal(fac.shape)
        eta += np.einsum("diq,dqj->dij", lam, fac)
    if pb.groups is not None:
        if groups is None:
            raise DataError("random-intercept models need group labels for new sites")
        labels = [str(g) for g in np.asarray(groups).reshape(-1)]
        if len(labels) != n_new:
            raise DataError("need one group label per new site")
        re = fit.draws.flat("re")[keep]
        re_sd = np.sqrt(fit.draws.flat("re_var")[keep])
        lookup = {g: k for k, g in enumerate(pb.group_labels)}
        fresh = {}
        for j, g in enumerate(labels):
            if g in lookup:
                eta[:, :, j] += re[:, :, lookup[g]]
            else:
                if g not in fresh:
                    fresh[g] = rng.standard_normal(re_sd.shape) * re_sd
                eta[:, :, j] += fresh[g]

    if pb.gaussian:
        mu = eta
        tau = np.sqrt(fit.draws.flat("tau_sq")[keep])[:, :, None]
        y = mu + tau * rng.standard_normal(mu.shape)
        return Prediction(mu, y, "y", pb.species)
    off = np.ones(n_new) if offset is None else np.asarray(offset, dtype=np.float64)
    if off.shape != (n_new,) or np.any(off <= 0):
        raise DataError("offsets must be positive, one per new site")
    mu = np.exp(eta) * off
    if pb.negbin:
        kappa = fit.draws.flat("kappa")[keep][:, :, None]
        lam_draw = rng.gamma(kappa, mu / kappa)
        counts = rng.poisson(lam_draw)
    else:
        counts = rng.poisson(mu)
    name = "N" if pb.latent else "y"
    return Prediction(mu, counts.astype(np.float64), name, pb.species)


class AbundanceEstimator(BaseEstimator):
    """Shared fit/predict plumbing; subclasses fix the model family."""

    _family = None

    def _spec(self, data):
        priors = self.priors if self.priors is not None else PriorSet()
        mcmc = MCMCSettings(n_chains=self.n_chains, n_iter=self.n_iter, n_burn=self.n_burn,
                            thin=self.thin, batch_length=self.batch_length, seed=self.seed)
        return ModelSpec(family=self._family, abundance_dist=self.abundance_dist,
                         detection_fn=self._detection_fn(), spatial=self.spatial,
                         species_correlation=self.species_correlation,
                         factor_count=self.factor_count, cov_model=self.cov_model,
                         neighbor_count=self.neighbor_count, priors=priors, mcmc=mcmc,
                         **self._design_fields(data))

    def _detection_fn(self):
        return None

    def _design_fields(self, data):
        return {}

    def fit(self, data, geometry=None):
        """Run the MCMC sampler.

        Parameters
        ----------
        data : design object or MultiSpeciesStack
        geometry : SiteGeometry, optional
            Required for spatial models; supplies offsets otherwise.

        Returns
        -------
        self
        """
        spec = self._spec(data)
        self.fit_ = fit_model(data, geometry, spec, n_threads=self.n_threads,
                              latent_sweeps=getattr(self, "latent_sweeps", 1))
        return self

    def _check_fitted(self):
        if not hasattr(self, "fit_"):
            raise ConfigError(f"{type(self).__name__} is not fitted yet; call fit first")
        return self.fit_

    def predict(self, coords=None, abund_covs=None, offset=None, groups=None, seed=0):
        """Posterior predictive draws at new sites (see :func:`predict_abundance`)."""
        return predict_abundance(self._check_fitted(), coords, abund_covs, offset, groups, seed)

    def waic(self):
        from ..diagnostics import waic
        return waic(self._check_fitted())

    def ppc(self, statistic="freemanTukey", grouping="site", seed=0):
        from ..diagnostics import ppc
        return ppc(self._check_fitted(), statistic, grouping, seed)

    def summary(self, include_latent=False):
        from ..diagnostics import summarize
        return summarize(self._check_fitted(), include_latent=include_latent)


def fit_model(data, geometry, spec, n_threads=None, latent_sweeps=1):
    """Validate inputs and run every chain for ``spec``; returns a :class:`FitResult`."""
    raise_for_errors(validate_spec(spec, data))
    stack = as_stack(data)
    if geometry is not None and not isinstance(geometry, SiteGeometry):
        geometry = SiteGeometry(geometry)
    if geometry is None and spec.spatial:
        raise ConfigError("spatial models need site coordinates")
    if geometry is not None and geometry.n_sites != stack.n_sites:
        raise DataError(f"geometry has {geometry.n_sites} sites but data has {stack.n_sites}")
    problem = Problem(spec, stack, geometry, latent_sweeps=latent_sweeps)
    draws = run_chains(lambda: AbundanceSampler(problem), spec.mcmc, n_threads)
    return FitResult(spec, draws, problem)
