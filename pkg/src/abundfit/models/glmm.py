"""Abundance GLMMs for directly observed counts or continuous measures (e.g. biomass)."""

from ..data import AbundanceDist, Family
from .base import AbundanceEstimator, fit_model, predict_abundance


def fit_glmm(data, geometry, spec, n_threads=None):
    """Fit any GLMM variant; Gaussian responses use the identity link."""
    if spec.family is not Family.GLMM:
        spec = spec.replace(family=Family.GLMM)
    return fit_model(data, geometry, spec, n_threads)


def glmm_predict(fit, new_coords=None, new_covs=None, groups=None, offsets=None, seed=0):
    """Posterior predictive draws of the mean and the response at new sites."""
    return predict_abundance(fit, new_coords, new_covs, offsets, groups, seed=seed)


class AbundanceGLMM(AbundanceEstimator):
    """Poisson, negative binomial or Gaussian abundance GLMM.

    Accepts the parameters of :class:`~abundfit.models.hds.DistanceSampling`
    except ``detection_fn`` and ``latent_sweeps``; ``abundance_dist`` may also
    be ``"Gaussian"``. Random intercepts come from the design's ``groups``.
    """

    _family = Family.GLMM

    def __init__(self, abundance_dist=AbundanceDist.POISSON, spatial=False,
                 species_correlation="none", factor_count=1, cov_model="exponential",
                 neighbor_count=15, priors=None, n_chains=1, n_iter=5000, n_burn=2500, thin=1,
                 batch_length=50, seed=0, n_threads=None):
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
