"""Observation submodels linking latent abundance N to the recorded counts."""

import numpy as np
from scipy.special import expit, gammaln, xlog1py, xlogy

from .. import detection
from ..data import MISSING
from ..likelihoods import log_pmf_binomial
from ..mcmc import ProposalState, adaptive_mh_update, curvature_step


def _normal_logpdf(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var


class DistanceObservation:
    """Multinomial distance-band model given N (one cell for undetected animals)."""

    kind = "distance"

    def __init__(self, stack, detection_fn):
        first = stack.first
        self.y = np.stack([d.counts for d in stack.designs]).astype(np.float64)  # (I, J, K)
        self.y_total = self.y.sum(-1)
        self.lower = self.y_total.astype(np.int64)
        self.V = first.det_covs.values
        self.det_names = first.det_covs.columns
        self.cutpoints = first.cutpoints
        self.survey = first.survey_type
        self.fn = detection_fn
        self.const = -gammaln(self.y + 1.0).sum(-1)
        self.marginal_y = self.y_total[..., None]
        self.marginal_mask = np.ones(self.marginal_y.shape, dtype=bool)

    @property
    def n_det(self):
        return self.V.shape[1]

    def initial_alpha(self, n_species):
        mid = 0.5 * (self.cutpoints[1:] + self.cutpoints[:-1])
        tot = self.y.sum((0, 1))
        scale = (tot * mid).sum() / tot.sum() if tot.sum() > 0 else self.cutpoints[-1] / 2
        alpha = np.zeros((n_species, self.n_det))
        alpha[:, 0] = np.log(max(scale, self.cutpoints[-1] / 20))
        return alpha

    def probabilities(self, alpha):
        sigma = np.exp(alpha @ self.V.T)  # (I, J)
        return detection.cell_probabilities(self.cutpoints, sigma, self.fn, self.survey)

    def marginal_parts(self, cells):
        """Per-site inputs for summing N out: miss probabilities and the N-free constant."""
        return cells.pi_miss[..., None], xlogy(self.y, cells.pi).sum(-1) + self.const

    def log_obs_N(self, N, cells):
        """Terms of log p(y | N) that vary with N."""
        unseen = N - self.y_total
        return gammaln(N + 1.0) - gammaln(unseen + 1.0) + xlogy(unseen, cells.pi_miss)

    def site_loglik(self, N, cells):
        unseen = N - self.y_total
        return (gammaln(N + 1.0) - gammaln(unseen + 1.0) + self.const
                + xlogy(self.y, cells.pi).sum(-1) + xlogy(unseen, cells.pi_miss))

    def replicate(self, N, cells, rng):
        probs = np.concatenate([cells.pi, cells.pi_miss[..., None]], axis=-1)
        probs = np.clip(probs, 0.0, 1.0)
        probs /= probs.sum(-1, keepdims=True)
        rep = rng.multinomial(N.astype(np.int64), probs)[..., :-1]
        return rep.astype(np.float64), N[..., None] * cells.pi

    def observed(self):
        return self.y, np.ones(self.y.shape, dtype=bool)


class ReplicateObservation:
    """Binomial repeated counts given N with logit-linear detection."""

    kind = "replicate"

    def __init__(self, stack):
        first = stack.first
        counts = np.stack([d.counts for d in stack.designs])  # (I, J, K)
        self.mask = first.observed  # (J, K)
        self.y = np.where(counts == MISSING, 0, counts).astype(np.float64)
        self.lower = self.y.max(-1).astype(np.int64)
        self.V = first.det_covs.values  # (J, K, P)
        self.det_names = first.det_covs.columns
        self.const = np.where(self.mask, -gammaln(self.y + 1.0), 0.0).sum(-1)
        self.marginal_y = self.y
        self.marginal_mask = np.ascontiguousarray(np.broadcast_to(self.mask, self.y.shape))

    @property
    def n_det(self):
        return self.V.shape[-1]

    def initial_alpha(self, n_species):
        mx = self.y.max(-1)
        mean = (self.y * self.mask).sum(-1) / self.mask.sum(-1)
        ok = mx > 0
        p = np.clip((mean[ok] / mx[ok]).mean() if ok.any() else 0.5, 0.1, 0.9)
        alpha = np.zeros((n_species, self.n_det))
        alpha[:, 0] = np.log(p / (1 - p))
        return alpha

    def probabilities(self, alpha):
        return expit(np.einsum("jkp,ip->ijk", self.V, alpha))

    def marginal_parts(self, p):
        const = np.where(self.mask, xlogy(self.y, p), 0.0).sum(-1) + self.const
        return 1.0 - p, const

    def log_obs_N(self, N, p):
        n = N[..., None]
        ll = gammaln(n + 1.0) - gammaln(n - self.y + 1.0) + xlog1py(n - self.y, -p)
        return np.where(self.mask, ll, 0.0).sum(-1)

    def site_loglik(self, N, p):
        n = np.broadcast_to(N[..., None], self.y.shape)
        ll = log_pmf_binomial(self.y, n, p)
        return np.where(self.mask, ll, 0.0).sum(-1)

    def replicate(self, N, p, rng):
        n = np.broadcast_to(N[..., None], p.shape).astype(np.int64)
        rep = np.where(self.mask, rng.binomial(n, p), 0)
        return rep.astype(np.float64), np.where(self.mask, n * p, 0.0)

    def observed(self):
        return self.y, np.broadcast_to(self.mask, self.y.shape)


class DetectionUpdater:
    """Component-wise adaptive Metropolis for detection coefficients.

    Coefficient ``p`` is proposed for all species at once; species are
    conditionally independent given abundance and the community
    hyperparameters. ``loglik(probs)`` returns per-species log-likelihoods.
    """

    def __init__(self, obs, alpha, loglik, prior_mean, prior_var, batch_length):
        self.obs = obs
        n_species, n_det = alpha.shape
        steps = np.empty((n_species, n_det))
        for p in range(n_det):
            steps[:, p] = curvature_step(self._target(alpha, loglik, p, prior_mean, prior_var),
                                         alpha[:, p], bounds=(1e-3, 1.0))
        self.state = [ProposalState((n_species,), steps[:, p], batch_length) for p in range(n_det)]
        for s in self.state:
            s.name = "alpha"

    def _target(self, alpha, loglik, p, prior_mean, prior_var):
        def target(col):
            trial = alpha.copy()
            trial[:, p] = col
            return (loglik(self.obs.probabilities(trial))
                    + _normal_logpdf(col, np.broadcast_to(prior_mean, alpha.shape)[:, p],
                                     np.broadcast_to(prior_var, alpha.shape)[:, p]))
        return target

    def update(self, alpha, loglik, prior_mean, prior_var, rng):
        for p, state in enumerate(self.state):
            target = self._target(alpha, loglik, p, prior_mean, prior_var)
            alpha[:, p], _, _ = adaptive_mh_update(alpha[:, p], target, state, rng)
        return alpha
