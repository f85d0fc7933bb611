"""Log-probability kernels for abundance and observation distributions.

Everything is evaluated in log space with ``gammaln``; all functions
broadcast over array arguments.
"""

import numpy as np
from scipy.special import betaln, gammaln, xlog1py, xlogy

from .data import AbundanceDist

LOG_2PI = np.log(2.0 * np.pi)


def log_pmf_abundance(n, mu, offset=1.0, dist=AbundanceDist.POISSON, kappa=None):
    """Poisson or negative binomial log-pmf at mean ``mu * offset``.

    The negative binomial uses the (mean, dispersion) form with variance
    ``m + m**2 / kappa``; ``kappa`` is the ``size`` parameter.
    """
    dist = AbundanceDist.parse(dist)
    n = np.asarray(n, dtype=np.float64)
    mean = np.asarray(mu, dtype=np.float64) * offset
    if dist is AbundanceDist.POISSON:
        return xlogy(n, mean) - mean - gammaln(n + 1.0)
    if dist is AbundanceDist.NEGBIN:
        if kappa is None:
            raise ValueError("negative binomial needs kappa")
        kappa = np.asarray(kappa, dtype=np.float64)
        # log(kappa / (kappa + mean)) written via log1p to stay accurate for huge kappa
        log_p0 = -np.log1p(mean / kappa)
        # betaln form of log C(n + kappa - 1, n) avoids cancellation for large kappa
        return (-betaln(kappa, n + 1.0) - np.log(n + kappa)
                + kappa * log_p0 + xlogy(n, mean) - xlogy(n, mean + kappa))
    raise ValueError("latent abundance must be Poisson or negative binomial")


def log_pmf_count_eta(n, eta, dist, kappa=None):
    """Full count log-pmf parameterized by the log mean ``eta``."""
    return log_pmf_abundance(n, np.exp(eta), 1.0, dist, kappa)


def log_pmf_multinomial_cells(y_star, n, pi_star):
    """Multinomial log-pmf of cell counts ``y_star`` (last axis) given ``n`` trials."""
    y_star = np.asarray(y_star, dtype=np.float64)
    pi_star = np.asarray(pi_star, dtype=np.float64)
    if y_star.shape[-1] != pi_star.shape[-1]:
        raise ValueError("count and probability vectors differ in length")
    n = np.asarray(n, dtype=np.float64)
    return gammaln(n + 1.0) - gammaln(y_star + 1.0).sum(-1) + xlogy(y_star, pi_star).sum(-1)


def log_pmf_binomial(y, n, p):
    """Binomial log-pmf; raises if any ``y > n``."""
    y = np.asarray(y, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if np.any(y > n):
        raise ValueError("binomial count exceeds number of trials")
    p = np.asarray(p, dtype=np.float64)
    return (gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
            + xlogy(y, p) + xlog1py(n - y, -p))


def log_pdf_gaussian(y, mu, tau_sq):
    y = np.asarray(y, dtype=np.float64)
    tau_sq = np.asarray(tau_sq, dtype=np.float64)
    return -0.5 * (LOG_2PI + np.log(tau_sq)) - 0.5 * (y - mu) ** 2 / tau_sq
