"""Simulate datasets from every supported model variant.

Variants are named like the fitting functions they pair with: ``DS``,
``spDS``, ``msDS``, ``lfMsDS``, ``sfMsDS``, the same five with ``NMix``, and
``abund``, ``spAbund``, ``msAbund``, ``lfMsAbund``, ``sfMsAbund``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import (AbundanceDist, ContinuousDesign, CountDesign, DesignMatrix, DetectionFn,
                   DistanceDesign, Family, ModelSpec, MultiSpeciesStack, SiteGeometry,
                   SpeciesCorrelation, SurveyType)
from .detection import cell_probabilities
from .exceptions import ConfigError
from .spatial import CovParams, build_neighbor_graph, dense_covariance, nngp_factorize, nngp_sample

DEFAULT_CUTPOINTS = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)

_FAMILY_SUFFIX = {"DS": Family.HDS, "NMix": Family.NMIX, "Abund": Family.GLMM}


def parse_variant(name):
    """Map a variant name to (family, spatial, species_correlation, multi_species)."""
    key = str(name)
    low = key.lower()
    for suffix, fam in _FAMILY_SUFFIX.items():
        if low.endswith(suffix.lower()):
            prefix = low[: -len(suffix)]
            break
    else:
        raise ConfigError(f"unknown model variant {name!r}")
    table = {
        "": (False, SpeciesCorrelation.NONE, False),
        "sp": (True, SpeciesCorrelation.NONE, False),
        "ms": (False, SpeciesCorrelation.NONE, True),
        "lfms": (False, SpeciesCorrelation.LATENT, True),
        "sfms": (True, SpeciesCorrelation.SPATIAL, True),
    }
    if prefix not in table:
        raise ConfigError(f"unknown model variant {name!r}")
    spatial, corr, multi = table[prefix]
    return fam, spatial, corr, multi


@dataclass(eq=False)
class SimTruth:
    """Simulated data together with every generating quantity."""

    data: object
    geometry: SiteGeometry
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self):
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v
        return {"seed": int(self.seed), "family": self.spec.family.value,
                "abundanceDist": self.spec.abundance_dist.value,
                "spatial": bool(self.spec.spatial),
                "speciesCorrelation": self.spec.species_correlation.value,
                "params": {k: conv(v) for k, v in self.params.items()}}

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _field(coords, params, model, m, dense, rng):
    if dense:
        cov = dense_covariance(coords, params, model)
        chol = np.linalg.cholesky(cov + 1e-10 * np.eye(len(coords)))
        return chol @ rng.standard_normal(len(coords))
    graph = build_neighbor_graph(coords, m)
    return nngp_sample(nngp_factorize(graph, params, model), graph, rng)


def _as_matrix(value, n_species, name):
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.ndim == 1:
        arr = np.tile(arr, (n_species, 1))
    if arr.shape[0] != n_species:
        raise ConfigError(f"{name} needs one row per species ({n_species})")
    return arr


def _default_beta(family, dist):
    if family is Family.HDS:
        return [0.5, 0.8]
    if family is Family.NMIX:
        return [1.0, -0.5]
    if dist is AbundanceDist.GAUSSIAN:
        return [1.0, 0.5]
    return [2.0, 0.54]


def sim_dataset(model, n_sites=100, seed=0, coords=None, extent=(0.0, 1.0), offset=None,
                n_species=None, abundance_dist=AbundanceDist.POISSON,
                detection_fn=DetectionFn.HALF_NORMAL, cov_model="exponential",
                neighbor_count=15, factor_count=1, dense=False, **truth):
    """Simulate one dataset.

    Parameters
    ----------
    model : str or ModelSpec
        Variant name (e.g. ``"spNMix"``) or a full specification.
    n_sites : int
        Number of sites when ``coords`` is not given; sites are uniform on
        ``extent`` squared.
    seed : int
        Sole source of randomness.
    n_species : int, optional
        Species count for multi-species variants (default 6).
    dense : bool
        Draw spatial fields from the exact GP instead of the NNGP.
    **truth
        Generating values overriding the defaults: ``beta``, ``alpha``,
        ``kappa``, ``tau_sq``, ``sigma_sq``, ``phi``, ``nu``, ``lambda_``,
        ``n_reps``, ``cutpoints``, ``survey_type``, ``n_groups``, ``re_var``.

    Returns
    -------
    SimTruth
    """
    rng = np.random.default_rng(seed)
    if isinstance(model, ModelSpec):
        spec = model
        multi = spec.species_correlation is not SpeciesCorrelation.NONE
        multi = multi or bool(n_species and n_species > 1)
    else:
        fam, spatial, corr, multi = parse_variant(model)
        spec = ModelSpec(family=fam, abundance_dist=abundance_dist,
                         detection_fn=detection_fn if fam is Family.HDS else None,
                         spatial=spatial, species_correlation=corr, factor_count=factor_count,
                         cov_model=cov_model, neighbor_count=neighbor_count)
    fam = spec.family
    dist = spec.abundance_dist
    n_sp = (n_species or 6) if multi else 1
    if coords is None:
        lo, hi = extent
        coords = rng.uniform(lo, hi, size=(n_sites, 2))
        width = hi - lo
    else:
        coords = np.asarray(coords, dtype=np.float64)
        width = float(np.ptp(coords, axis=0).max())
    n_sites = coords.shape[0]
    geometry = SiteGeometry(coords, offset)
    params = {}

    beta = truth.get("beta", _default_beta(fam, dist))
    beta = np.asarray(beta, dtype=np.float64)
    if multi and beta.ndim == 1:
        beta = beta + rng.normal(0.0, 0.5, size=(n_sp, beta.size))
    beta = _as_matrix(beta, n_sp, "beta")
    n_cov = beta.shape[1] - 1
    x_raw = rng.standard_normal((n_sites, n_cov))
    abund = DesignMatrix(x_raw, tuple(f"x{k + 1}" for k in range(n_cov)), standardize=False)
    eta = beta @ abund.values.T
    params["beta"] = beta
    params["abund_covs"] = x_raw

    model_name = spec.cov_model
    if spec.spatial and spec.species_correlation is SpeciesCorrelation.NONE:
        cov = CovParams(truth.get("sigma_sq", 1.0), truth.get("phi", 3.0 / (0.5 * width)),
                        truth.get("nu", 1.0) if model_name.value == "matern" else None)
        w = _field(coords, cov, model_name, spec.neighbor_count, dense, rng)
        eta = eta + w
        params.update(sigma_sq=cov.sigma_sq, phi=cov.phi, w=w)
        if cov.nu is not None:
            params["nu"] = cov.nu
    if spec.species_correlation is not SpeciesCorrelation.NONE:
        q = spec.factor_count
        lam = truth.get("lambda_")
        if lam is None:
            lam = np.tril(rng.normal(0.0, 0.5, size=(n_sp, q)), k=-1)
            lam[np.arange(min(n_sp, q)), np.arange(min(n_sp, q))] = 1.0
        lam = np.asarray(lam, dtype=np.float64)
        if spec.species_correlation is SpeciesCorrelation.SPATIAL:
            phi = np.broadcast_to(np.asarray(truth.get("phi", 3.0 / (0.5 * width)), float), (q,))
            nu = np.broadcast_to(np.asarray(truth.get("nu", 1.0), float), (q,))
            fac = np.stack([
                _field(coords, CovParams(1.0, phi[l],
                                         nu[l] if model_name.value == "matern" else None),
                       model_name, spec.neighbor_count, dense, rng) for l in range(q)])
            params["phi"] = phi.copy()
            if model_name.value == "matern":
                params["nu"] = nu.copy()
        else:
            fac = rng.standard_normal((q, n_sites))
        eta = eta + lam @ fac
        params.update(lambda_=lam, factors=fac)

    groups = None
    if fam is Family.GLMM and truth.get("n_groups"):
        n_groups = int(truth["n_groups"])
        re_var = float(truth.get("re_var", 0.5))
        groups = rng.integers(0, n_groups, size=n_sites)
        re = rng.normal(0.0, np.sqrt(re_var), size=(n_sp, n_groups))
        eta = eta + re[:, groups]
        params.update(groups=groups, re=re, re_var=re_var)

    kappa = None
    if dist is AbundanceDist.NEGBIN:
        kappa = np.broadcast_to(np.asarray(truth.get("kappa", 2.0), float), (n_sp,)).copy()
        params["kappa"] = kappa

    if dist is AbundanceDist.GAUSSIAN:
        if fam is not Family.GLMM:
            raise ConfigError("Gaussian requires GLMM")
        tau_sq = np.broadcast_to(np.asarray(truth.get("tau_sq", 0.5), float), (n_sp,)).copy()
        y = eta + np.sqrt(tau_sq)[:, None] * rng.standard_normal(eta.shape)
        params.update(tau_sq=tau_sq, mu=eta)
        designs = [ContinuousDesign(y[i], abund, groups) for i in range(n_sp)]
        return _finish(designs, n_sp, geometry, spec, params, seed)

    mu = np.exp(eta) * geometry.offset
    if kappa is not None:
        counts = rng.poisson(rng.gamma(kappa[:, None], mu / kappa[:, None]))
    else:
        counts = rng.poisson(mu)
    params["mu"] = mu
    if fam is Family.GLMM:
        designs = [ContinuousDesign(counts[i].astype(np.float64), abund, groups)
                   for i in range(n_sp)]
        return _finish(designs, n_sp, geometry, spec, params, seed)

    params["N"] = counts
    alpha = truth.get("alpha", [np.log(20.0)] if fam is Family.HDS else [0.0])
    alpha = np.asarray(alpha, dtype=np.float64)
    if multi and alpha.ndim == 1:
        alpha = alpha + rng.normal(0.0, 0.2, size=(n_sp, alpha.size))
    alpha = _as_matrix(alpha, n_sp, "alpha")
    n_det = alpha.shape[1] - 1
    params["alpha"] = alpha
    if fam is Family.HDS:
        cut = np.asarray(truth.get("cutpoints", DEFAULT_CUTPOINTS), dtype=np.float64)
        survey = SurveyType.parse(truth.get("survey_type", SurveyType.LINE))
        v_raw = rng.standard_normal((n_sites, n_det))
        det = DesignMatrix(v_raw, tuple(f"v{k + 1}" for k in range(n_det)), standardize=False)
        sigma = np.exp(alpha @ det.values.T)
        cells = cell_probabilities(cut, sigma, spec.detection_fn, survey)
        probs = np.concatenate([cells.pi, cells.pi_miss[..., None]], axis=-1)
        probs = np.clip(probs, 0.0, 1.0)
        probs /= probs.sum(-1, keepdims=True)
        y = rng.multinomial(counts, probs)[..., :-1]
        params.update(det_covs=v_raw, sigma=sigma, pi=cells.pi)
        spec = spec.replace(cutpoints=tuple(cut.tolist()), survey_type=survey)
        designs = [DistanceDesign(y[i], cut, survey, abund, det) for i in range(n_sp)]
    else:
        n_reps = int(truth.get("n_reps", 3))
        v_raw = rng.standard_normal((n_sites, n_reps, n_det))
        det = DesignMatrix(v_raw, tuple(f"v{k + 1}" for k in range(n_det)), standardize=False)
        p = expit(np.einsum("jkp,ip->ijk", det.values, alpha))
        y = rng.binomial(np.broadcast_to(counts[..., None], p.shape), p)
        params.update(det_covs=v_raw, p=p)
        designs = [CountDesign(y[i], abund, det) for i in range(n_sp)]
    return _finish(designs, n_sp, geometry, spec, params, seed)


def _finish(designs, n_sp, geometry, spec, params, seed):
    if n_sp == 1:
        data = designs[0]
    else:
        data = MultiSpeciesStack(tuple(f"sp{i + 1}" for i in range(n_sp)), tuple(designs))
    return SimTruth(data, geometry, spec, params, seed)
