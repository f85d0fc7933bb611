"""N-mixture models: latent abundance observed through repeated binomial counts."""

import numpy as np
from scipy.special import expit

from ..data import AbundanceDist, Family
from ..likelihoods import log_pmf_abundance, log_pmf_binomial
from .base import AbundanceEstimator, fit_model, predict_abundance


def nmix_site_loglik(N, y, mu, p, dist=AbundanceDist.POISSON, kappa=None, observed=None):
    """Abundance term plus binomial terms over the surveys actually made.

    ``y`` and ``p`` are (K,); ``observed`` masks missing replicates.
    Returns ``-inf`` when ``N`` is below a count.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), y.shape)
    mask = np.ones(y.shape, bool) if observed is None else np.asarray(observed, bool)
    if np.any(y[mask] > N):
        return -np.inf
    obs = log_pmf_binomial(y[mask], np.full(mask.sum(), float(N)), p[mask]).sum()
    return float(log_pmf_abundance(N, mu, 1.0, dist, kappa) + obs)


def fit_nmix(data, geometry, spec, n_threads=None, latent_sweeps=1):
    """Fit any N-mixture variant."""
    if spec.family is not Family.NMIX:
        spec = spec.replace(family=Family.NMIX)
    return fit_model(data, geometry, spec, n_threads, latent_sweeps)


def nmix_predict(fit, new_coords=None, new_abund_covs=None, offsets=None, seed=0):
    """Posterior draws of expected and latent abundance at new sites."""
    return predict_abundance(fit, new_coords, new_abund_covs, offsets, seed=seed)


def detection_probability_draws(fit, det_covs=None):
    """Draws of p (draws, species, points) over a grid of raw detection covariates."""
    design = fit.problem.stack.first.det_covs
    if det_covs is None:
        det_covs = np.zeros((1, len(design.names)))
    V = design.transform(np.atleast_2d(np.asarray(det_covs, dtype=np.float64)))
    return expit(np.einsum("dip,jp->dij", fit.draws.flat("alpha"), V))


class NMixture(AbundanceEstimator):
    """Bayesian N-mixture model with optional NNGP and factor structure.

    Parameters are those of :class:`~abundfit.models.hds.DistanceSampling`
    without ``detection_fn``; detection is logit-linear in survey-level
    covariates.
    """

    _family = Family.NMIX

    def __init__(self, abundance_dist=AbundanceDist.POISSON, spatial=False,
                 species_correlation="none", factor_count=1, cov_model="exponential",
                 neighbor_count=15, priors=None, n_chains=1, n_iter=5000, n_burn=2500, thin=1,
                 batch_length=50, seed=0, n_threads=None, latent_sweeps=1):
        self.abundance_dist = abundance_dist
        self.spatial = spatial
        self.species_correlation = species_correlation
        self.factor_count = factor_count
        self.cov_model = cov_model
        self.neighbor_count = neighbor_count
        self.priors = priors
        self.n_chains = n_chains
        self.n_iter = n_iter
        self.n_burn = n_burn
        self.thin = thin
        self.batch_length = batch_length
        self.seed = seed
        self.n_threads = n_threads
        self.latent_sweeps = latent_sweeps

    def predict_detection(self, det_covs=None):
        """Draws of detection probability at raw detection covariate values."""
        return detection_probability_draws(self._check_fitted(), det_covs)
