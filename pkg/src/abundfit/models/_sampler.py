"""Metropolis-within-Gibbs sampler shared by every model family.

One :class:`Problem` holds the immutable inputs of a fit; each chain gets its
own :class:`AbundanceSampler`. The abundance submodel is

    eta_ij = x_j' beta_i + w*_ij + e_{i,g(j)} (+ log A_j for counts)

where ``w*`` is a single NNGP field (one species), ``Lambda @ factors``
(latent or spatial factor models) or absent. Counts-based families update
coefficients, detection and dispersion with N summed out (including a joint
abundance/detection block move per species), then draw N
exactly from its full conditional and follow with +-1 sweeps; spatial and
random-effect updates treat N as the abundance "data". GLMMs use the
observed response directly.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .. import _kernels
from ..data import AbundanceDist, Family, SpeciesCorrelation, as_stack
from ..exceptions import NumericalError
from ..likelihoods import log_pdf_gaussian, log_pmf_abundance
from ..mcmc import (BlockProposal, ChainSampler, ProposalState, adaptive_mh_update,
                    block_mh_update, curvature_step, gibbs_gaussian_regression,
                    gibbs_inverse_gamma, update_latent_N)
from ..spatial import build_neighbor_graph, correlation_factor, independent_graph, quadratic_form
from ._observation import DetectionUpdater, DistanceObservation, ReplicateObservation

LOG_2PI = np.log(2 * np.pi)


def _normal_logpdf(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var


def _count_ll(n, eta, kappa, negbin):
    """Count log-likelihood up to terms free of ``eta``."""
    if not negbin:
        return n * eta - np.exp(eta)
    k = kappa[:, None]
    return n * eta - (n + k) * np.log(np.exp(eta) + k)


class _Interval:
    """Logit map between a bounded interval and the real line."""

    def __init__(self, lo, hi):
        self.lo, self.hi = float(lo), float(hi)

    def to_real(self, x):
        s = (np.asarray(x) - self.lo) / (self.hi - self.lo)
        return np.log(s) - np.log1p(-s)

    def from_real(self, t):
        return self.lo + (self.hi - self.lo) * expit(t)

    def log_jacobian(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.log(self.hi - self.lo) - np.logaddexp(0, -t) - np.logaddexp(0, t)

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)


class Problem:
    """Immutable inputs of one fit, shared read-only by every chain."""

    def __init__(self, spec, data, geometry, latent_sweeps=1):
        stack = as_stack(data)
        first = stack.first
        self.spec = spec
        self.stack = stack
        self.geometry = geometry
        self.species = stack.species
        self.n_species = stack.n_species
        self.n_sites = stack.n_sites
        self.X = np.ascontiguousarray(first.abund_covs.values)
        self.coef_names = first.abund_covs.columns
        self.dist = spec.abundance_dist
        self.gaussian = self.dist is AbundanceDist.GAUSSIAN
        self.negbin = self.dist is AbundanceDist.NEGBIN
        self.latent = spec.family is not Family.GLMM
        self.latent_sweeps = int(latent_sweeps)
        if self.gaussian or geometry is None:
            self.log_offset = np.zeros(self.n_sites)
        else:
            self.log_offset = np.log(geometry.offset)
        self.priors = spec.priors
        self.hierarchical = self.n_species > 1
        self.batch_length = spec.mcmc.batch_length

        if spec.family is Family.HDS:
            self.obs = DistanceObservation(stack, spec.detection_fn)
        elif spec.family is Family.NMIX:
            self.obs = ReplicateObservation(stack)
        if self.latent:
            n_obs = self.obs.marginal_y.shape[-1]
            self.flat_lower = np.ascontiguousarray(self.obs.lower.reshape(-1))
            self.flat_y = np.ascontiguousarray(self.obs.marginal_y.reshape(-1, n_obs))
            self.flat_mask = np.ascontiguousarray(self.obs.marginal_mask.reshape(-1, n_obs))
        else:
            self.obs = None
            self.y = np.ascontiguousarray(np.stack([d.response for d in stack.designs]))

        self.groups = getattr(first, "groups", None) if self.obs is None else None
        if self.groups is not None:
            self.group_labels = first.group_labels
            self.n_groups = len(first.group_labels)
            self.onehot = sp.csr_matrix(
                (np.ones(self.n_sites), (np.arange(self.n_sites), self.groups)),
                shape=(self.n_sites, self.n_groups))
            self.group_sizes = np.bincount(self.groups, minlength=self.n_groups)

        corr = spec.species_correlation
        self.factor_model = corr is not SpeciesCorrelation.NONE
        self.single_spatial = spec.spatial and not self.factor_model
        self.q = spec.factor_count if self.factor_model else 0
        self.matern = spec.cov_model.value == "matern"
        self.graph = None
        if spec.spatial:
            self.graph = build_neighbor_graph(geometry, spec.neighbor_count)
            self.phi_range = _Interval(*self.priors.resolve_phi(geometry))
            self.nu_range = _Interval(*self.priors.nu_bounds)
        elif corr is SpeciesCorrelation.LATENT:
            self.graph = independent_graph(self.n_sites)
        self.kappa_range = _Interval(*self.priors.kappa_bounds)

    # free elements of the loadings matrix: lower triangle below a unit diagonal
    def loading_mask(self):
        mask = np.tril(np.ones((self.n_species, self.q), dtype=bool), k=-1)
        return mask

    def fixed_loadings(self):
        lam = np.zeros((self.n_species, self.q))
        k = min(self.n_species, self.q)
        lam[np.arange(k), np.arange(k)] = 1.0
        return lam

    def counts_source(self):
        """Observed counts used to seed intercepts (latent: lower bound + 1)."""
        if self.latent:
            return self.obs.lower + 1.0
        return self.y


class AbundanceSampler(ChainSampler):
    """State and updates of one MCMC chain."""

    def __init__(self, problem):
        self.pb = problem

    # ------------------------------------------------------------------ setup

    def initialize(self, rng, attempt):
        pb = self.pb
        I, J, P = pb.n_species, pb.n_sites, pb.X.shape[1]
        self.beta = np.zeros((I, P))
        src = pb.counts_source()
        if pb.gaussian:
            self.beta[:, 0] = src.mean(1)
            self.tau_sq = np.maximum(src.var(1), 1e-6)
        else:
            dens = src.mean(1) / np.exp(pb.log_offset).mean()
            self.beta[:, 0] = np.log(np.maximum(dens, 0.1))
        if attempt:
            self.beta += rng.normal(0, 0.5, self.beta.shape)
        self.kappa = np.ones(I)
        if pb.hierarchical:
            self.beta_mu = self.beta.mean(0)
            self.beta_var = np.ones(P)
        self.wstar = np.zeros((I, J))
        self.re = None
        if pb.groups is not None:
            self.re = np.zeros((I, pb.n_groups))
            self.re_var = np.ones(I)
        if pb.single_spatial:
            self.w = np.zeros(J)
            self.sigma_sq = 1.0
            self.phi = pb.phi_range.mid
            self.nu = pb.nu_range.mid if pb.matern else None
            self.corr = correlation_factor(pb.graph, self.phi, pb.spec.cov_model, self.nu)
        if pb.factor_model:
            self.lam = pb.fixed_loadings()
            self.fac = np.zeros((pb.q, J))
            if pb.spec.spatial:
                self.phi_f = np.full(pb.q, pb.phi_range.mid)
                self.nu_f = np.full(pb.q, pb.nu_range.mid) if pb.matern else None
                self.fcorr = [correlation_factor(pb.graph, self.phi_f[l], pb.spec.cov_model,
                                                 None if self.nu_f is None else self.nu_f[l])
                              for l in range(pb.q)]
            else:
                self.fcorr = [correlation_factor(pb.graph, 1.0, "exponential")] * pb.q
        if pb.latent:
            self.N = pb.obs.lower + 1
            self.n = self.N.astype(np.float64)
            self.alpha = pb.obs.initial_alpha(I)
            if attempt:
                self.alpha += rng.normal(0, 0.2, self.alpha.shape)
            if pb.hierarchical:
                self.alpha_mu = self.alpha.mean(0)
                self.alpha_var = np.ones(pb.obs.n_det)
            self.det = pb.obs.probabilities(self.alpha)
        else:
            self.n = pb.y
        self._refresh_eta()
        self._init_proposals()

    def _init_proposals(self):
        pb = self.pb
        bl = pb.batch_length
        self._props = []
        if not pb.gaussian:
            self.beta_prop = []
            for p in range(pb.X.shape[1]):
                target = self._beta_target(p)
                step = curvature_step(target, self.beta[:, p], bounds=(1e-3, 1.0))
                self.beta_prop.append(self._new_prop((pb.n_species,), step, "beta"))
        if pb.negbin:
            self.kappa_prop = self._new_prop((pb.n_species,), 0.5, "kappa")
        if pb.latent:
            mean0, var0 = self._coef_prior("alpha")
            self.det_updater = DetectionUpdater(pb.obs, self.alpha, self._detection_loglik,
                                                mean0, var0, bl)
            self._props.extend(self.det_updater.state)
            self.joint_prop = BlockProposal(pb.n_species, self.beta.shape[1] + self.alpha.shape[1],
                                            bl)
            self.joint_prop.name = "joint"
            self._props.append(self.joint_prop)
        if self.re is not None and not pb.gaussian:
            self.re_prop = self._new_prop(self.re.shape, 0.3, "re")
        if pb.single_spatial:
            self.phi_prop = self._new_prop((), 0.5, "phi")
            if pb.matern:
                self.nu_prop = self._new_prop((), 0.5, "nu")
        if pb.factor_model:
            mask = pb.loading_mask()
            if not pb.gaussian:
                self.lam_prop = [self._new_prop((int(mask[:, l].sum()),), 0.3, "lambda")
                                 for l in range(pb.q)]
            if pb.spec.spatial:
                self.phi_f_prop = [self._new_prop((), 0.5, "phi") for _ in range(pb.q)]
                if pb.matern:
                    self.nu_f_prop = [self._new_prop((), 0.5, "nu") for _ in range(pb.q)]

    def _new_prop(self, shape, step, name):
        prop = ProposalState(shape, step, self.pb.batch_length)
        prop.name = name
        self._props.append(prop)
        return prop

    def proposals(self):
        return self._props

    def _refresh_eta(self):
        pb = self.pb
        self.xb = self.beta @ pb.X.T
        eta = self.xb + self.wstar + pb.log_offset
        if self.re is not None:
            eta = eta + self.re[:, pb.groups]
        self.eta = np.ascontiguousarray(eta)

    def _coef_prior(self, which):
        pb = self.pb
        if pb.hierarchical:
            mu, var = (self.beta_mu, self.beta_var) if which == "beta" else (self.alpha_mu,
                                                                              self.alpha_var)
            return mu[None, :], var[None, :]
        return pb.priors.coef_mean, pb.priors.coef_var

    # ----------------------------------------------------------------- updates

    def step(self, rng):
        pb = self.pb
        self._refresh_eta()
        if pb.gaussian:
            self._update_beta_gibbs(rng)
        else:
            self._update_beta_mh(rng)
        if pb.hierarchical:
            self.beta_mu, self.beta_var = self._community(self.beta, rng)
        if pb.latent:
            mean0, var0 = self._coef_prior("alpha")
            self.alpha = self.det_updater.update(self.alpha, self._detection_loglik, mean0, var0,
                                                 rng)
            self.det = pb.obs.probabilities(self.alpha)
            self._update_joint(rng)
            if pb.hierarchical:
                self.alpha_mu, self.alpha_var = self._community(self.alpha, rng)
        if pb.negbin:
            self._update_kappa(rng)
        if pb.latent:
            self._draw_N(rng)
            self._update_N(rng)
        if self.re is not None:
            self._update_re(rng)
        if pb.single_spatial:
            self._update_field(rng)
        if pb.factor_model:
            self._update_factor_model(rng)
        if pb.gaussian:
            resid = pb.y - self.eta
            self.tau_sq = np.array([
                gibbs_inverse_gamma(pb.priors.resid_var_shape, pb.priors.resid_var_rate, r, rng)
                for r in resid])

    def _marginal(self, eta, det, kappa=None, rng=None):
        """Log-likelihood (I, J) with latent N summed out; optionally draws N exactly."""
        pb = self.pb
        q, const = pb.obs.marginal_parts(det)
        I, J = eta.shape
        kappa = self.kappa if kappa is None else kappa
        kap = np.repeat(kappa, J) if pb.negbin else np.zeros(I * J)
        q = np.ascontiguousarray(np.broadcast_to(q, pb.obs.marginal_y.shape).reshape(I * J, -1))
        ll = np.empty(I * J)
        n_out = np.empty(I * J if rng is not None else 0, dtype=np.int64)
        u = rng.random(I * J) if rng is not None else np.empty(0)
        code = _kernels.NEGBIN if pb.negbin else _kernels.POISSON
        _kernels.marginal_abundance(np.ascontiguousarray(eta).reshape(-1), kap, code,
                                    pb.flat_lower, pb.flat_y, q, pb.flat_mask, u, ll, n_out)
        ll = ll.reshape(I, J) + const
        if rng is None:
            return ll
        return ll, n_out.reshape(I, J)

    def _update_joint(self, rng):
        """Joint move of each species' abundance and detection coefficients.

        Abundance and detection trade off against each other through N; the
        learned proposal covariance lets the chain move along that ridge.
        """
        pb = self.pb
        P = self.beta.shape[1]
        rest = self.eta - self.xb
        bm, bv = self._coef_prior("beta")
        am, av = self._coef_prior("alpha")

        def target(theta):
            beta, alpha = theta[:, :P], theta[:, P:]
            ll = self._marginal(beta @ pb.X.T + rest, pb.obs.probabilities(alpha)).sum(1)
            return (ll + _normal_logpdf(beta, bm, bv).sum(1)
                    + _normal_logpdf(alpha, am, av).sum(1))

        theta = np.concatenate([self.beta, self.alpha], axis=1)
        theta, acc = block_mh_update(theta, target, self.joint_prop, rng)
        if acc.any():
            self.beta = np.ascontiguousarray(theta[:, :P])
            self.alpha = np.ascontiguousarray(theta[:, P:])
            self._refresh_eta()
            self.det = pb.obs.probabilities(self.alpha)

    def _detection_loglik(self, probs):
        return self._marginal(self.eta, probs).sum(1)

    def _draw_N(self, rng):
        _, self.N = self._marginal(self.eta, self.det, rng=rng)
        self.n = self.N.astype(np.float64)

    def _update_N(self, rng):
        pb = self.pb
        mu = np.exp(self.eta)
        kappa = self.kappa[:, None] if pb.negbin else None

        def target(N):
            return (log_pmf_abundance(N, mu, 1.0, pb.dist, kappa)
                    + pb.obs.log_obs_N(N.astype(np.float64), self.det))

        N = self.N
        for _ in range(pb.latent_sweeps):
            N = update_latent_N(N, pb.obs.lower, target, rng)
        self.N = N
        self.n = N.astype(np.float64)

    def _beta_target(self, p):
        pb = self.pb
        xp = pb.X[:, p]
        base = self.eta - self.beta[:, p:p + 1] * xp
        mean0, var0 = self._coef_prior("beta")
        mean0 = np.broadcast_to(mean0, self.beta.shape)[:, p]
        var0 = np.broadcast_to(var0, self.beta.shape)[:, p]

        def target(col):
            eta = base + col[:, None] * xp
            if pb.latent:
                ll = self._marginal(eta, self.det).sum(1)
            else:
                ll = _count_ll(self.n, eta, self.kappa, pb.negbin).sum(1)
            return ll + _normal_logpdf(col, mean0, var0)
        return target

    def _update_beta_mh(self, rng):
        pb = self.pb
        for p, prop in enumerate(self.beta_prop):
            target = self._beta_target(p)
            old = self.beta[:, p].copy()
            new, acc, _ = adaptive_mh_update(old, target, prop, rng)
            if acc.any():
                self.beta[:, p] = new
                self.eta += (new - old)[:, None] * pb.X[:, p]
        self.xb = self.beta @ pb.X.T

    def _update_beta_gibbs(self, rng):
        pb = self.pb
        mean0, var0 = self._coef_prior("beta")
        mean0 = np.broadcast_to(mean0, self.beta.shape)
        var0 = np.broadcast_to(var0, self.beta.shape)
        offset = self.eta - self.xb
        for i in range(pb.n_species):
            self.beta[i] = gibbs_gaussian_regression(pb.y[i] - offset[i], pb.X, mean0[i],
                                                     var0[i], self.tau_sq[i], rng)
        self._refresh_eta()

    def _community(self, coef, rng):
        pr = self.pb.priors
        n_sp = coef.shape[0]
        var = self.beta_var if coef is self.beta else self.alpha_var
        prec = n_sp / var + 1.0 / pr.coef_var
        mean = (coef.sum(0) / var + pr.coef_mean / pr.coef_var) / prec
        mu = mean + rng.standard_normal(mean.shape) / np.sqrt(prec)
        ss = ((coef - mu) ** 2).sum(0)
        var = 1.0 / rng.gamma(pr.comm_var_shape + 0.5 * n_sp, 1.0 / (pr.comm_var_rate + 0.5 * ss))
        return mu, var

    def _update_kappa(self, rng):
        pb = self.pb
        rng_k = pb.kappa_range
        mu = np.exp(self.eta)

        def target(t):
            k = rng_k.from_real(t)
            if pb.latent:
                ll = self._marginal(self.eta, self.det, kappa=k).sum(1)
            else:
                ll = log_pmf_abundance(self.n, mu, 1.0, AbundanceDist.NEGBIN, k[:, None]).sum(1)
            return ll + rng_k.log_jacobian(t)

        t, _, _ = adaptive_mh_update(rng_k.to_real(self.kappa), target, self.kappa_prop, rng)
        self.kappa = rng_k.from_real(t)

    def _update_re(self, rng):
        pb = self.pb
        pr = pb.priors
        site_re = self.re[:, pb.groups]
        base = self.eta - site_re
        if pb.gaussian:
            sums = (pb.y - base) @ pb.onehot  # (I, G)
            prec = pb.group_sizes[None, :] / self.tau_sq[:, None] + 1.0 / self.re_var[:, None]
            mean = sums / self.tau_sq[:, None] / prec
            self.re = mean + rng.standard_normal(mean.shape) / np.sqrt(prec)
        else:
            def target(eff):
                ll = _count_ll(self.n, base + eff[:, pb.groups], self.kappa, pb.negbin)
                return np.asarray(ll @ pb.onehot) + _normal_logpdf(eff, 0.0, self.re_var[:, None])
            self.re, _, _ = adaptive_mh_update(self.re, target, self.re_prop, rng)
        self.re_var = np.array([
            gibbs_inverse_gamma(pr.re_var_shape, pr.re_var_rate, r, rng) for r in self.re])
        self.eta = np.ascontiguousarray(base + self.re[:, pb.groups])

    def _sweep(self, lam, field, graph, factor, rng):
        pb = self.pb
        J = pb.n_sites
        z = rng.standard_normal(J)
        if pb.gaussian:
            _kernels.sweep_gaussian(graph.order, self.eta, lam, field, graph.neighbors,
                                    graph.counts, factor.B, factor.F, graph.child_ptr,
                                    graph.child_idx, graph.child_pos, pb.y, self.tau_sq, z)
        else:
            u = rng.random(J)
            code = _kernels.NEGBIN if pb.negbin else _kernels.POISSON
            _kernels.sweep_counts(graph.order, self.eta, lam, field, graph.neighbors,
                                  graph.counts, factor.B, factor.F, graph.child_ptr,
                                  graph.child_idx, graph.child_pos, self.n, self.kappa,
                                  code, z, u)

    def _covariance_update(self, field, sigma_sq, phi, nu, corr, phi_prop, nu_prop, rng):
        """Metropolis updates of decay (and smoothness) for one field."""
        pb = self.pb
        graph = pb.graph
        model = pb.spec.cov_model
        cache = {}

        def density(phi_v, nu_v):
            key = (float(phi_v), None if nu_v is None else float(nu_v))
            if key not in cache:
                try:
                    cache[key] = correlation_factor(graph, phi_v, model, nu_v)
                except NumericalError:
                    cache[key] = None
            fac = cache[key]
            if fac is None:
                return -np.inf, None
            ld = (-0.5 * np.sum(np.log(sigma_sq * fac.F))
                  - 0.5 * quadratic_form(field, fac, graph) / sigma_sq)
            return ld, fac

        def phi_target(t):
            return density(pb.phi_range.from_real(t), nu)[0] + pb.phi_range.log_jacobian(t)

        cache[(float(phi), None if nu is None else float(nu))] = corr
        t, acc, _ = adaptive_mh_update(pb.phi_range.to_real(phi), phi_target, phi_prop, rng)
        if acc:
            phi = float(pb.phi_range.from_real(t))
            corr = density(phi, nu)[1]
        if pb.matern:
            def nu_target(t):
                return density(phi, pb.nu_range.from_real(t))[0] + pb.nu_range.log_jacobian(t)
            t, acc, _ = adaptive_mh_update(pb.nu_range.to_real(nu), nu_target, nu_prop, rng)
            if acc:
                nu = float(pb.nu_range.from_real(t))
                corr = density(phi, nu)[1]
        return phi, nu, corr

    def _shift_level(self, field, factor, loadings, rng):
        """Gibbs move of (field - X delta, beta_i + loadings_i * delta).

        The linear predictor is unchanged, so only the field's NNGP density
        and the coefficient prior enter; both are quadratic in ``delta``.
        """
        pb = self.pb
        graph = pb.graph
        nbr, counts, B = graph.neighbors, graph.counts, factor.B
        A = np.column_stack([_kernels.residuals(np.ascontiguousarray(pb.X[:, p]), nbr, counts, B)
                             for p in range(pb.X.shape[1])])
        r = _kernels.residuals(field, nbr, counts, B)
        mean0, var0 = self._coef_prior("beta")
        mean0 = np.broadcast_to(mean0, self.beta.shape)
        var0 = np.broadcast_to(var0, self.beta.shape)
        lam = loadings[:, None]
        AF = A / factor.F[:, None]
        prec = AF.T @ A + np.diag((lam ** 2 / var0).sum(0))
        lin = AF.T @ r - (lam * (self.beta - mean0) / var0).sum(0)
        try:
            chol = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            return
        mean = np.linalg.solve(chol.T, np.linalg.solve(chol, lin))
        delta = mean + np.linalg.solve(chol.T, rng.standard_normal(mean.shape))
        field -= pb.X @ delta
        self.beta += lam * delta

    def _update_field(self, rng):
        pb = self.pb
        pr = pb.priors
        lam = np.ones(pb.n_species)
        self._sweep(lam, self.w, pb.graph, self.corr.scaled(self.sigma_sq), rng)
        self._shift_level(self.w, self.corr.scaled(self.sigma_sq), lam, rng)
        self.xb = self.beta @ pb.X.T
        self.wstar = self.w[None, :].copy()
        q = quadratic_form(self.w, self.corr, pb.graph)
        self.sigma_sq = 1.0 / rng.gamma(pr.sigma_sq_shape + 0.5 * pb.n_sites,
                                        1.0 / (pr.sigma_sq_rate + 0.5 * q))
        self.phi, self.nu, self.corr = self._covariance_update(
            self.w, self.sigma_sq, self.phi, self.nu, self.corr, self.phi_prop,
            getattr(self, "nu_prop", None), rng)

    def _update_factor_model(self, rng):
        pb = self.pb
        for l in range(pb.q):
            field = self.fac[l].copy()
            self._sweep(self.lam[:, l].copy(), field, pb.graph, self.fcorr[l], rng)
            self._shift_level(field, self.fcorr[l], self.lam[:, l], rng)
            self.fac[l] = field
            if pb.spec.spatial:
                nu = None if self.nu_f is None else self.nu_f[l]
                phi, nu, self.fcorr[l] = self._covariance_update(
                    field, 1.0, self.phi_f[l], nu, self.fcorr[l], self.phi_f_prop[l],
                    self.nu_f_prop[l] if pb.matern else None, rng)
                self.phi_f[l] = phi
                if pb.matern:
                    self.nu_f[l] = nu
        self._update_loadings(rng)
        self.wstar = self.lam @ self.fac
        self._refresh_eta()

    def _update_loadings(self, rng):
        pb = self.pb
        mask = pb.loading_mask()
        var0 = pb.priors.loading_var
        self.wstar = self.lam @ self.fac
        self._refresh_eta()
        if pb.gaussian:
            for i in range(1, pb.n_species):
                free = np.flatnonzero(mask[i])
                fixed = self.lam[i].copy()
                fixed[free] = 0.0
                resid = pb.y[i] - (self.eta[i] - self.lam[i] @ self.fac) - fixed @ self.fac
                self.lam[i, free] = gibbs_gaussian_regression(
                    resid, self.fac[free].T, 0.0, var0, self.tau_sq[i], rng)
            return
        for l in range(pb.q):
            rows = np.flatnonzero(mask[:, l])
            if rows.size == 0:
                continue
            f = self.fac[l]
            base = self.eta[rows] - self.lam[rows, l][:, None] * f
            kappa = self.kappa[rows]

            def target(col, base=base, f=f, rows=rows, kappa=kappa):
                return (_count_ll(self.n[rows], base + col[:, None] * f, kappa, pb.negbin).sum(1)
                        + _normal_logpdf(col, 0.0, var0))

            new, acc, _ = adaptive_mh_update(self.lam[rows, l], target, self.lam_prop[l], rng)
            self.lam[rows, l] = new
            self.eta[rows] = base + new[:, None] * f

    # ----------------------------------------------------------------- output

    def current(self):
        pb = self.pb
        out = {"beta": self.beta.copy()}
        if pb.hierarchical:
            out["beta_comm_mean"] = self.beta_mu.copy()
            out["beta_comm_var"] = self.beta_var.copy()
        if pb.latent:
            out["alpha"] = self.alpha.copy()
            if pb.hierarchical:
                out["alpha_comm_mean"] = self.alpha_mu.copy()
                out["alpha_comm_var"] = self.alpha_var.copy()
            out["N"] = self.N.copy()
        if pb.negbin:
            out["kappa"] = self.kappa.copy()
        if pb.gaussian:
            out["tau_sq"] = self.tau_sq.copy()
        if self.re is not None:
            out["re"] = self.re.copy()
            out["re_var"] = self.re_var.copy()
        if pb.single_spatial:
            out["sigma_sq"] = np.float64(self.sigma_sq)
            out["phi"] = np.float64(self.phi)
            if pb.matern:
                out["nu"] = np.float64(self.nu)
            out["w"] = self.w.copy()
        if pb.factor_model:
            out["lambda"] = self.lam.copy()
            out["factors"] = self.fac.copy()
            if pb.spec.spatial:
                out["phi"] = self.phi_f.copy()
                if pb.matern:
                    out["nu"] = self.nu_f.copy()
        return out

    def site_loglik(self):
        pb = self.pb
        if pb.gaussian:
            return log_pdf_gaussian(pb.y, self.eta, self.tau_sq[:, None])
        kappa = self.kappa[:, None] if pb.negbin else None
        ll = log_pmf_abundance(self.n, np.exp(self.eta), 1.0, pb.dist, kappa)
        if pb.latent:
            ll = ll + pb.obs.site_loglik(self.n, self.det)
        return ll

    def log_posterior(self):
        ll = self.site_loglik()
        return float(np.sum(ll)) if np.all(np.isfinite(ll)) else -np.inf
