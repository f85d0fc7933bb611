"""Hierarchical distance sampling: latent abundance observed through binned distances."""

import numpy as np

from ..data import AbundanceDist, DetectionFn, Family, as_stack
from ..detection import cell_probabilities
from ..likelihoods import log_pmf_abundance, log_pmf_multinomial_cells
from .base import AbundanceEstimator, fit_model, predict_abundance


def hds_site_loglik(N, y, mu, sigma, cutpoints, detection_fn, survey,
                    dist=AbundanceDist.POISSON, kappa=None):
    """Conditional log-likelihood of one site: abundance term plus multinomial bands.

    Parameters
    ----------
    N : int
        Latent abundance.
    y : array_like, shape (K,)
        Counts per distance band.
    mu : float
        Expected abundance (offset included).
    sigma : float
        Detection scale at the site.

    Returns
    -------
    float
        ``-inf`` when ``N`` is below the observed total.
    """
    y = np.asarray(y, dtype=np.float64)
    unseen = N - y.sum()
    if unseen < 0:
        return -np.inf
    cells = cell_probabilities(cutpoints, sigma, detection_fn, survey)
    y_star = np.append(y, unseen)
    pi_star = np.append(cells.pi, cells.pi_miss)
    return float(log_pmf_abundance(N, mu, 1.0, dist, kappa)
                 + log_pmf_multinomial_cells(y_star, N, pi_star))


def fit_hds(data, geometry, spec, n_threads=None, latent_sweeps=1):
    """Fit any distance-sampling variant (single or multi-species, spatial or not)."""
    if spec.family is not Family.HDS:
        spec = spec.replace(family=Family.HDS)
    return fit_model(data, geometry, spec, n_threads, latent_sweeps)


def hds_predict(fit, new_coords=None, new_abund_covs=None, offsets=None, seed=0):
    """Posterior draws of expected and latent abundance at new sites."""
    return predict_abundance(fit, new_coords, new_abund_covs, offsets, seed=seed)


def detection_scale_draws(fit, det_covs=None):
    """Draws of the detection scale ``sigma`` (draws, species, points) at raw covariates."""
    design = fit.problem.stack.first.det_covs
    if det_covs is None:
        det_covs = np.zeros((1, len(design.names)))
    V = design.transform(np.atleast_2d(det_covs))
    return np.exp(np.einsum("dip,jp->dij", fit.draws.flat("alpha"), V))


class DistanceSampling(AbundanceEstimator):
    """Bayesian hierarchical distance sampling with optional NNGP and factor structure.

    Parameters
    ----------
    detection_fn : {"HalfNormal", "NegExponential"}
    abundance_dist : {"Poisson", "NegBinomial"}
    spatial : bool
        Add an NNGP spatial random effect to log abundance.
    species_correlation : {"none", "latentFactor", "spatialFactor"}
    factor_count : int
    cov_model : {"exponential", "spherical", "gaussian", "matern"}
    neighbor_count : int
        NNGP conditioning-set size.
    priors : PriorSet, optional
    n_chains, n_iter, n_burn, thin, batch_length, seed : int
        MCMC layout; ``n_iter`` includes burn-in and chain ``c`` uses ``seed + c``.
    n_threads : int, optional
        Threads for running chains; results do not depend on it.
    latent_sweeps : int
        Plus-or-minus-one sweeps over latent N per iteration.

    Examples
    --------
    >>> from abundfit.simulate import sim_dataset
    >>> sim = sim_dataset("DS", n_sites=30, seed=1)
    >>> est = DistanceSampling(n_iter=200, n_burn=100).fit(sim.data, sim.geometry)
    >>> est.fit_.draws.samples["beta"].shape
    (1, 100, 1, 1)
    """

    _family = Family.HDS

    def __init__(self, detection_fn=DetectionFn.HALF_NORMAL, abundance_dist=AbundanceDist.POISSON,
                 spatial=False, species_correlation="none", factor_count=1,
                 cov_model="exponential", neighbor_count=15, priors=None, n_chains=1,
                 n_iter=5000, n_burn=2500, thin=1, batch_length=50, seed=0, n_threads=None,
                 latent_sweeps=1):
        self.detection_fn = detection_fn
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

    def _detection_fn(self):
        return self.detection_fn

    def _design_fields(self, data):
        first = as_stack(data).first
        return {"cutpoints": getattr(first, "cutpoints", None),
                "survey_type": getattr(first, "survey_type", None)}

    def predict_detection(self, det_covs=None):
        """Draws of detection scale and overall detection probability.

        Returns
        -------
        sigma, p_detect : ndarray, shape (draws, species, points)
        """
        fit = self._check_fitted()
        sigma = detection_scale_draws(fit, det_covs)
        obs = fit.problem.obs
        cells = cell_probabilities(obs.cutpoints, sigma, obs.fn, obs.survey)
        return sigma, 1.0 - cells.pi_miss
