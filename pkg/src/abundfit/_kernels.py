"""Compiled inner loops: batched neighbor solves and sequential field sweeps.

Every kernel takes its random numbers as arguments so that results depend
only on the caller's ``numpy.random.Generator``.
"""

import math

import numpy as np
from numba import njit

POISSON = 0
NEGBIN = 1


@njit(cache=True, nogil=True)
def batched_cholesky_solve(cnn, c, counts):
    """Solve ``cnn[i][:k, :k] b = c[i][:k]`` for every site via Cholesky.

    Returns ``(b, bad)`` where ``bad`` is the first site whose neighbor
    covariance is not positive definite, or -1.
    """
    n, m = c.shape
    b = np.zeros((n, m))
    low = np.zeros((m, m))
    tmp = np.zeros(m)
    for i in range(n):
        k = counts[i]
        for r in range(k):
            for s in range(r + 1):
                acc = cnn[i, r, s]
                for t in range(s):
                    acc -= low[r, t] * low[s, t]
                if r == s:
                    if acc <= 0.0:
                        return b, i
                    low[r, r] = math.sqrt(acc)
                else:
                    low[r, s] = acc / low[s, s]
        for r in range(k):
            acc = c[i, r]
            for t in range(r):
                acc -= low[r, t] * tmp[t]
            tmp[r] = acc / low[r, r]
        for r in range(k - 1, -1, -1):
            acc = tmp[r]
            for t in range(r + 1, k):
                acc -= low[t, r] * b[i, t]
            b[i, r] = acc / low[r, r]
    return b, -1


@njit(cache=True, nogil=True)
def residuals(w, nbr, counts, b):
    n = w.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = w[i]
        for p in range(counts[i]):
            acc -= b[i, p] * w[nbr[i, p]]
        out[i] = acc
    return out


@njit(cache=True, nogil=True)
def cond_moments(i, w, nbr, counts, b, f, cptr, cidx, cpos):
    """Full-conditional mean and variance of ``w[i]`` under the NNGP."""
    prec = 1.0 / f[i]
    acc = 0.0
    for p in range(counts[i]):
        acc += b[i, p] * w[nbr[i, p]]
    lin = acc / f[i]
    for t in range(cptr[i], cptr[i + 1]):
        c = cidx[t]
        pi = cpos[t]
        coef = b[c, pi]
        r = w[c]
        for p in range(counts[c]):
            if p != pi:
                r -= b[c, p] * w[nbr[c, p]]
        prec += coef * coef / f[c]
        lin += coef * r / f[c]
    var = 1.0 / prec
    return lin * var, var


@njit(cache=True, nogil=True)
def count_loglik_eta(n, eta, kappa, dist):
    """Poisson/NB log-pmf of ``n`` at log-mean ``eta`` dropping eta-free terms."""
    if dist == POISSON:
        return n * eta - math.exp(eta)
    mu = math.exp(eta)
    return n * eta - (n + kappa) * math.log(mu + kappa)


@njit(cache=True, nogil=True)
def sweep_counts(order, eta, lam, w, nbr, counts, b, f, cptr, cidx, cpos,
                 n, kappa, dist, z, u):
    """Metropolis sweep over one latent field with NNGP-conditional proposals.

    ``eta`` (I, J) is the current log-mean, updated in place; ``lam`` (I,)
    maps the field into each species' predictor. Returns accepted count.
    """
    n_species = eta.shape[0]
    accepted = 0
    for r in range(order.shape[0]):
        j = order[r]
        mean, var = cond_moments(j, w, nbr, counts, b, f, cptr, cidx, cpos)
        prop = mean + math.sqrt(var) * z[r]
        delta = prop - w[j]
        ratio = 0.0
        for i in range(n_species):
            if lam[i] == 0.0:
                continue
            new = eta[i, j] + lam[i] * delta
            ratio += (count_loglik_eta(n[i, j], new, kappa[i], dist)
                      - count_loglik_eta(n[i, j], eta[i, j], kappa[i], dist))
        if math.log(u[r]) < ratio:
            for i in range(n_species):
                eta[i, j] += lam[i] * delta
            w[j] = prop
            accepted += 1
    return accepted


@njit(cache=True, nogil=True)
def sweep_gaussian(order, eta, lam, w, nbr, counts, b, f, cptr, cidx, cpos,
                   y, tau_sq, z):
    """Exact Gibbs sweep over one latent field under Gaussian observations."""
    n_species = eta.shape[0]
    for r in range(order.shape[0]):
        j = order[r]
        mean, var = cond_moments(j, w, nbr, counts, b, f, cptr, cidx, cpos)
        prec = 1.0 / var
        lin = mean * prec
        for i in range(n_species):
            if lam[i] == 0.0:
                continue
            resid = y[i, j] - (eta[i, j] - lam[i] * w[j])
            prec += lam[i] * lam[i] / tau_sq[i]
            lin += lam[i] * resid / tau_sq[i]
        new = lin / prec + z[r] / math.sqrt(prec)
        delta = new - w[j]
        for i in range(n_species):
            eta[i, j] += lam[i] * delta
        w[j] = new


# latent-abundance sums: log sum_N p(N | mu) p(y | N) by term ratios

_RESCALE = 1e250
_LOG_RESCALE = math.log(_RESCALE)
_TAIL_TOL = 1e-17
_MAX_STEPS = 10_000_000


@njit(cache=True, nogil=True, inline="always")
def _log_first_term(lo, mu, kappa, dist, y, q, mask):
    if dist == POISSON:
        lp = -mu - math.lgamma(lo + 1.0)
        if lo > 0:
            lp += lo * math.log(mu)
    else:
        lp = (math.lgamma(lo + kappa) - math.lgamma(kappa) - math.lgamma(lo + 1.0)
              - kappa * math.log1p(mu / kappa))
        if lo > 0:
            lp += lo * (math.log(mu) - math.log(mu + kappa))
    for k in range(y.shape[0]):
        if not mask[k]:
            continue
        d = lo - y[k]
        lp += math.lgamma(lo + 1.0) - math.lgamma(d + 1.0)
        if d > 0:
            if q[k] <= 0.0:
                return -math.inf
            lp += d * math.log(q[k])
    return lp


@njit(cache=True, nogil=True, inline="always")
def _ratio(n, mu, kappa, dist, y, q, mask):
    """term(n + 1) / term(n) and an upper bound on every later ratio."""
    if dist == POISSON:
        prior = mu / (n + 1.0)
        bound = prior
    else:
        c = mu / (mu + kappa)
        prior = (n + kappa) / (n + 1.0) * c
        bound = max(prior, c)
    obs = 1.0
    for k in range(y.shape[0]):
        if mask[k]:
            obs *= (n + 1.0) / (n + 1.0 - y[k]) * q[k]
    return prior * obs, bound * obs


@njit(cache=True, nogil=True, inline="always")
def _mode(lo, mu, kappa, dist, y, q, mask):
    """Smallest n >= lo whose next term is smaller; -1 if none is found."""
    r, _ = _ratio(lo, mu, kappa, dist, y, q, mask)
    if r < 1.0:
        return lo
    a = lo
    width = 1.0
    while True:
        b = lo + width
        r, _ = _ratio(b, mu, kappa, dist, y, q, mask)
        if r < 1.0:
            break
        a = b
        width *= 2.0
        if width > 1e15:
            return -1.0
    while b - a > 1.0:
        m = math.floor(0.5 * (a + b))
        r, _ = _ratio(m, mu, kappa, dist, y, q, mask)
        if r >= 1.0:
            a = m
        else:
            b = m
    return b


@njit(cache=True, nogil=True, inline="always")
def _reached(acc, target, log_target, done, total):
    # target is in the final scale; before the last rescale compare in logs
    if done == total:
        return acc >= target
    return math.log(acc) >= log_target + (total - done) * _LOG_RESCALE


@njit(cache=True, nogil=True)
def marginal_abundance(eta, kappa, dist, lower, y, q, mask, u, out_ll, out_n):
    """Sum latent abundance out of one site per row, optionally drawing N.

    Row ``i`` has log mean ``eta[i]``, lower bound ``lower[i]`` and
    observation factors ``C(N, y_k) q_k^(N - y_k)`` (times constants) for the
    masked ``k``. Terms are summed outward from their mode. Upward, summation
    stops once a geometric bound on the tail falls below 1e-17 of the running
    sum; downward, once the remaining count times the current term does
    (terms fall monotonically away from the mode). When ``u`` is non-empty,
    ``out_n[i]`` receives an exact draw from the normalized terms. Rows that
    need more than ten million terms (absurd proposals) get ``-inf``.
    Returns the number of such rows.
    """
    n_capped = 0
    draw = u.shape[0] > 0
    for i in range(eta.shape[0]):
        mu = math.exp(eta[i])
        lo = float(lower[i])
        start = _mode(lo, mu, kappa[i], dist, y[i], q[i], mask[i])
        lp = -math.inf
        if start >= 0.0:
            lp = _log_first_term(start, mu, kappa[i], dist, y[i], q[i], mask[i])
        if lp == -math.inf:
            out_ll[i] = -math.inf
            if start < 0.0:
                n_capped += 1
            if draw:
                out_n[i] = lower[i]
            continue
        s = 1.0
        rescales = 0
        # downward from the mode
        t = 1.0
        n = start
        down = 0
        while n > lo and down <= _MAX_STEPS:
            r, _ = _ratio(n - 1.0, mu, kappa[i], dist, y[i], q[i], mask[i])
            if r <= 0.0:
                break
            t /= r
            n -= 1.0
            s += t
            down += 1
            if t > _RESCALE:
                t /= _RESCALE
                s /= _RESCALE
                rescales += 1
            if (n - lo) * t < _TAIL_TOL * s:
                break
        # upward from the mode
        t = math.exp(-rescales * _LOG_RESCALE)
        n = start
        up = 0
        while down + up <= _MAX_STEPS:
            r, bound = _ratio(n, mu, kappa[i], dist, y[i], q[i], mask[i])
            if r <= 0.0:
                break
            t *= r
            n += 1.0
            s += t
            up += 1
            if t > _RESCALE:
                t /= _RESCALE
                s /= _RESCALE
                rescales += 1
            if bound < 1.0 and t * bound / (1.0 - bound) < _TAIL_TOL * s:
                break
        if down + up > _MAX_STEPS:
            n_capped += 1
            out_ll[i] = -math.inf
            if draw:
                out_n[i] = lower[i]
            continue
        out_ll[i] = lp + math.log(s) + rescales * _LOG_RESCALE
        if not draw:
            continue
        # second pass replays the identical sequence of terms and rescalings
        target = u[i] * s
        log_target = math.log(target) if target > 0.0 else -math.inf
        acc = 1.0
        done = 0
        t = 1.0
        n = start
        found = _reached(acc, target, log_target, done, rescales)
        for _ in range(down):
            if found:
                break
            r, _ = _ratio(n - 1.0, mu, kappa[i], dist, y[i], q[i], mask[i])
            t /= r
            n -= 1.0
            acc += t
            if t > _RESCALE:
                t /= _RESCALE
                acc /= _RESCALE
                done += 1
            found = _reached(acc, target, log_target, done, rescales)
        if not found:
            t = math.exp(-done * _LOG_RESCALE)
            n = start
            for _ in range(up):
                r, _ = _ratio(n, mu, kappa[i], dist, y[i], q[i], mask[i])
                t *= r
                n += 1.0
                acc += t
                if t > _RESCALE:
                    t /= _RESCALE
                    acc /= _RESCALE
                    done += 1
                if _reached(acc, target, log_target, done, rescales):
                    break
        out_n[i] = int(n)
    return n_capped
