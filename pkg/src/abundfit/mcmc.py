"""Sampling engine: adaptive Metropolis, conjugate updates and chain orchestration."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import MCMCSettings
from .exceptions import ConfigError, NumericalError

TARGET_ACCEPT = 0.44
MAX_INIT_ATTEMPTS = 100


class ProposalState:
    """Log step sizes and batch acceptance counters for a block of RW proposals.

    After every ``batch_length`` calls each element's log step moves by
    ``min(0.01, 1/sqrt(batch))`` towards a 0.44 acceptance rate, until
    :meth:`freeze` is called.
    """

    def __init__(self, shape=(), step=1.0, batch_length=50, target=TARGET_ACCEPT):
        self.log_step = np.log(np.broadcast_to(np.asarray(step, dtype=np.float64), shape)).copy()
        self.batch_length = int(batch_length)
        self.target = target
        self.adapting = True
        self._batch_accepts = np.zeros(shape, dtype=np.int64)
        self._in_batch = 0
        self.n_batches = 0
        self.total_accepts = np.zeros(shape, dtype=np.int64)
        self.total_proposals = 0

    @property
    def step(self):
        return np.exp(self.log_step)

    def record(self, accepted):
        accepted = np.asarray(accepted, dtype=bool)
        self._batch_accepts += accepted
        self.total_accepts += accepted
        self.total_proposals += 1
        self._in_batch += 1
        if self._in_batch < self.batch_length:
            return
        if self.adapting:
            self.n_batches += 1
            delta = min(0.01, 1.0 / math.sqrt(self.n_batches))
            rate = self._batch_accepts / self.batch_length
            self.log_step += np.where(rate > self.target, delta, -delta)
        self._batch_accepts[...] = 0
        self._in_batch = 0

    def freeze(self):
        self.adapting = False

    def acceptance_rate(self):
        return self.total_accepts / max(self.total_proposals, 1)


class BlockProposal:
    """Multivariate random walk for independent blocks with a learned covariance.

    While adapting, the empirical covariance of each block's visited states is
    accumulated and refreshed every ``batch_length`` steps (once at least
    ``min_samples`` states are seen); the overall scale follows the same
    batch rule as :class:`ProposalState` towards ``target``. :meth:`freeze`
    fixes both, after which the move is a plain symmetric Metropolis kernel.
    """

    def __init__(self, n_blocks, dim, batch_length=50, target=0.3, min_samples=100):
        self.dim = dim
        self.batch_length = int(batch_length)
        self.target = target
        self.min_samples = min_samples
        self.adapting = True
        self.log_scale = np.full(n_blocks, np.log(2.38 / math.sqrt(dim)))
        self.chol = None
        self._n = 0
        self._mean = np.zeros((n_blocks, dim))
        self._m2 = np.zeros((n_blocks, dim, dim))
        self._batch_accepts = np.zeros(n_blocks, dtype=np.int64)
        self._in_batch = 0
        self._n_batches = 0
        self.total_accepts = np.zeros(n_blocks, dtype=np.int64)
        self.total_proposals = 0

    @property
    def ready(self):
        return self.chol is not None

    def observe(self, theta):
        if not self.adapting:
            return
        self._n += 1
        delta = theta - self._mean
        self._mean += delta / self._n
        self._m2 += delta[:, :, None] * (theta - self._mean)[:, None, :]
        if self._n >= self.min_samples and self._n % self.batch_length == 0:
            cov = self._m2 / (self._n - 1)
            jitter = 1e-10 + 1e-6 * np.einsum("bii->b", cov)[:, None, None] / self.dim
            self.chol = np.linalg.cholesky(cov + jitter * np.eye(self.dim))

    def propose(self, theta, rng):
        z = rng.standard_normal(theta.shape)
        return theta + np.exp(self.log_scale)[:, None] * np.einsum("bij,bj->bi", self.chol, z)

    def record(self, accepted):
        accepted = np.asarray(accepted, dtype=bool)
        self._batch_accepts += accepted
        self.total_accepts += accepted
        self.total_proposals += 1
        self._in_batch += 1
        if self._in_batch < self.batch_length:
            return
        if self.adapting:
            self._n_batches += 1
            delta = min(0.01, 1.0 / math.sqrt(self._n_batches))
            rate = self._batch_accepts / self.batch_length
            self.log_scale += np.where(rate > self.target, delta, -delta)
        self._batch_accepts[...] = 0
        self._in_batch = 0

    def freeze(self):
        self.adapting = False

    def acceptance_rate(self):
        return self.total_accepts / max(self.total_proposals, 1)


def block_mh_update(value, log_target, proposal, rng):
    """One joint Metropolis step per block (row) of ``value``; no-op until the proposal is ready.

    ``log_target`` maps an (n_blocks, dim) array to per-block log targets.
    """
    value = np.asarray(value, dtype=np.float64)
    proposal.observe(value)
    if not proposal.ready:
        return value, np.zeros(value.shape[0], dtype=bool)
    current = np.asarray(log_target(value), dtype=np.float64)
    if not np.all(np.isfinite(current)):
        raise NumericalError("non-finite log target at the current state")
    prop = proposal.propose(value, rng)
    proposed = np.asarray(log_target(prop), dtype=np.float64)
    log_u = np.log(rng.random(value.shape[0]))
    with np.errstate(invalid="ignore"):
        accept = (log_u < proposed - current) & np.isfinite(proposed)
    proposal.record(accept)
    return np.where(accept[:, None], prop, value), accept


def curvature_step(log_target, value, h=1e-3, scale=2.4, bounds=(1e-3, 5.0)):
    """Initial RW step from a finite-difference estimate of the target's curvature."""
    value = np.asarray(value, dtype=np.float64)
    f0 = log_target(value)
    fp = log_target(value + h)
    fm = log_target(value - h)
    curv = -(fp - 2 * f0 + fm) / (h * h)
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(np.isfinite(curv) & (curv > 0), scale / np.sqrt(curv), bounds[1])
    return np.clip(step, *bounds)


def adaptive_mh_update(value, log_target, state, rng, current=None):
    """One random-walk Metropolis step on the working scale.

    ``log_target`` maps an array shaped like ``value`` to per-element log
    targets; elements must be conditionally independent so that they can be
    accepted or rejected separately.

    Returns
    -------
    new_value, accepted, new_log_target
    """
    value = np.asarray(value, dtype=np.float64)
    if current is None:
        current = log_target(value)
    current = np.asarray(current, dtype=np.float64)
    if not np.all(np.isfinite(current)):
        raise NumericalError("non-finite log target at the current state")
    prop = value + state.step * rng.standard_normal(value.shape)
    proposed = np.asarray(log_target(prop), dtype=np.float64)
    log_u = np.log(rng.random(value.shape))
    with np.errstate(invalid="ignore"):
        accept = log_u < proposed - current
    accept &= np.isfinite(proposed)
    state.record(accept)
    return (np.where(accept, prop, value), accept, np.where(accept, proposed, current))


def update_latent_N(N, lower, log_target, rng):
    """Plus-or-minus-one Metropolis update of integer latent abundance.

    Proposals below ``lower`` are rejected outright.
    """
    N = np.asarray(N, dtype=np.int64)
    move = np.where(rng.random(N.shape) < 0.5, -1, 1)
    prop = N + move
    valid = prop >= lower
    prop = np.where(valid, prop, N)
    ratio = log_target(prop) - log_target(N)
    log_u = np.log(rng.random(N.shape))
    accept = valid & (log_u < ratio)
    return np.where(accept, prop, N)


def gibbs_gaussian_regression(y, X, prior_mean, prior_var, resid_var, rng):
    """Draw coefficients from the conjugate Gaussian full conditional.

    ``prior_var`` may be a scalar, a vector (independent priors) or a matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = X.shape[1]
    prior_var = np.asarray(prior_var, dtype=np.float64)
    mean0 = np.broadcast_to(np.asarray(prior_mean, dtype=np.float64), (p,))
    if prior_var.ndim < 2:
        prior_prec = np.diag(1.0 / np.broadcast_to(prior_var, (p,)))
    else:
        prior_prec = np.linalg.inv(prior_var)
    prec = X.T @ X / resid_var + prior_prec
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NumericalError("posterior precision of regression coefficients is singular") from None
    rhs = X.T @ y / resid_var + prior_prec @ mean0
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return mean + np.linalg.solve(chol.T, rng.standard_normal(p))


def gibbs_inverse_gamma(shape0, rate0, residuals, rng):
    """Draw a variance from IG(shape0 + n/2, rate0 + SS/2)."""
    r = np.asarray(residuals, dtype=np.float64).ravel()
    shape = shape0 + 0.5 * r.size
    rate = rate0 + 0.5 * float(r @ r)
    return 1.0 / rng.gamma(shape, 1.0 / rate)


class ChainSampler:
    """Interface implemented by every model's per-chain sampler."""

    def initialize(self, rng, attempt):
        raise NotImplementedError

    def log_posterior(self):
        raise NotImplementedError

    def step(self, rng):
        raise NotImplementedError

    def current(self):
        """Mapping of parameter block name to its current value."""
        raise NotImplementedError

    def site_loglik(self):
        """Per-species, per-site conditional log-likelihood, shape (I, J)."""
        raise NotImplementedError

    def proposals(self):
        return []

    def freeze_adaptation(self):
        for p in self.proposals():
            p.freeze()


@dataclass
class PosteriorDraws:
    """Stored draws: each block is (chains, samples, *shape)."""

    samples: dict
    loglik: np.ndarray
    settings: MCMCSettings
    acceptance: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.loglik.shape[0]

    @property
    def n_samples(self):
        return self.loglik.shape[1]

    def flat(self, name):
        arr = self.samples[name]
        return arr.reshape((-1,) + arr.shape[2:])

    def __contains__(self, name):
        return name in self.samples


def _run_one(factory, settings, chain):
    rng = np.random.default_rng(settings.seed + chain)
    sampler = factory()
    for attempt in range(MAX_INIT_ATTEMPTS):
        sampler.initialize(rng, attempt)
        if np.isfinite(sampler.log_posterior()):
            break
    else:
        raise NumericalError(f"non-finite posterior at initialization after "
                             f"{MAX_INIT_ATTEMPTS} re-draws (chain {chain})")
    n_store = settings.n_stored
    store, loglik = {}, None
    k = 0
    for it in range(settings.n_iter):
        if it == settings.n_burn:
            sampler.freeze_adaptation()
        sampler.step(rng)
        if it >= settings.n_burn and (it - settings.n_burn) % settings.thin == 0:
            for name, val in sampler.current().items():
                val = np.asarray(val)
                if name not in store:
                    store[name] = np.empty((n_store,) + val.shape, dtype=val.dtype)
                store[name][k] = val
            ll = sampler.site_loglik()
            if loglik is None:
                loglik = np.empty((n_store,) + ll.shape)
            loglik[k] = ll
            k += 1
    acc = {}
    for p in sampler.proposals():
        acc.setdefault(getattr(p, "name", "param"), []).append(p.acceptance_rate())
    return store, loglik, acc


def run_chains(factory, settings, n_threads=None):
    """Run ``settings.n_chains`` independent chains; chain ``c`` uses seed ``seed + c``.

    ``factory`` is a zero-argument callable returning a fresh
    :class:`ChainSampler`. Burn-in is discarded and thinning applied. Output
    does not depend on ``n_threads``.
    """
    if settings.n_stored < 1:
        raise ConfigError("no stored samples: n_iter must exceed n_burn")
    if settings.thin < 1 or settings.n_chains < 1:
        raise ConfigError("thin and n_chains must be >= 1")
    n_threads = settings.n_chains if n_threads is None else max(1, int(n_threads))
    chains = range(settings.n_chains)
    if n_threads == 1 or settings.n_chains == 1:
        results = [_run_one(factory, settings, c) for c in chains]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(lambda c: _run_one(factory, settings, c), chains))
    samples = {name: np.stack([r[0][name] for r in results]) for name in results[0][0]}
    loglik = np.stack([r[1] for r in results])
    acceptance = {}
    for _, _, acc in results:
        for name, rates in acc.items():
            acceptance.setdefault(name, []).append(rates)
    return PosteriorDraws(samples, loglik, settings, acceptance)
