"""Shared oracles for the unit and acceptance tests."""

import numpy as np
from scipy.special import logsumexp

from abundfit.data import CountDesign, DistanceDesign, ModelSpec
from abundfit.detection import cell_probabilities
from abundfit.models import hds_site_loglik, nmix_site_loglik
from abundfit.models._sampler import AbundanceSampler, Problem


def _sampler(spec, design, beta0, alpha0, kappa, sweeps):
    pb = Problem(spec, design, None, latent_sweeps=sweeps)
    s = AbundanceSampler(pb)
    s.initialize(np.random.default_rng(0), 0)
    s.beta[:] = beta0
    s.alpha[:] = alpha0
    s.kappa[:] = kappa
    s.det = pb.obs.probabilities(s.alpha)
    s._refresh_eta()
    return s


def sample_site_posterior(s, n_draws, n_copies, seed, exact=True, burn=300):
    """Run only the latent-N updates on ``n_copies`` identical sites; pooled draws.

    ``exact`` includes the draw with N summed out, as in a full iteration;
    otherwise only the random-walk sweeps run.
    """
    rng = np.random.default_rng(seed)
    per = -(-n_draws // n_copies)
    out = []
    for it in range(burn + per):
        if exact:
            s._draw_N(rng)
        s._update_N(rng)
        if it >= burn:
            out.append(s.N[0].copy())
    return np.concatenate(out)[:n_draws]


def total_variation(draws, logp, support):
    p = np.exp(logp - logsumexp(logp))
    counts = np.bincount(draws - support[0], minlength=len(support))
    if counts.size > len(support):
        return 1.0
    return 0.5 * np.abs(counts / counts.sum() - p).sum()


def hds_enumeration_tv(y=(3, 1, 0, 0, 0), mu=8.0, sigma=20.0, cutpoints=(0, 10, 20, 30, 40, 50),
                       survey="line", fn="HalfNormal", dist="Poisson", kappa=1.0,
                       n_draws=100_000, n_copies=2000, seed=0, exact=True):
    y = np.asarray(y, dtype=float)
    design = DistanceDesign(np.tile(y, (n_copies, 1)), cutpoints, survey)
    spec = ModelSpec("HDS", abundance_dist=dist, detection_fn=fn, cutpoints=cutpoints,
                     survey_type=survey)
    s = _sampler(spec, design, np.log(mu), np.log(sigma), kappa, 1 if exact else 5)
    draws = sample_site_posterior(s, n_draws, n_copies, seed, exact)
    support = np.arange(int(y.sum()), int(y.sum()) + 400)
    logp = np.array([hds_site_loglik(n, y, mu, sigma, np.asarray(cutpoints, float), fn, survey,
                                     dist, kappa) for n in support])
    return total_variation(draws, logp, support)


def nmix_enumeration_tv(y=(2, 3, 1), mu=6.0, p=0.4, dist="Poisson", kappa=1.0,
                        n_draws=100_000, n_copies=2000, seed=0, exact=True):
    y = np.asarray(y, dtype=float)
    design = CountDesign(np.tile(y, (n_copies, 1)))
    spec = ModelSpec("NMIX", abundance_dist=dist)
    s = _sampler(spec, design, np.log(mu), np.log(p / (1 - p)), kappa, 1 if exact else 5)
    draws = sample_site_posterior(s, n_draws, n_copies, seed, exact)
    support = np.arange(int(y.max()), int(y.max()) + 400)
    logp = np.array([nmix_site_loglik(n, y, mu, p, dist, kappa) for n in support])
    return total_variation(draws, logp, support)


def hds_band_probabilities(sigma, cutpoints, fn, survey):
    return cell_probabilities(np.asarray(cutpoints, float), sigma, fn, survey)
