"""Covariance functions, nearest-neighbor Gaussian processes and kriging.

The NNGP replaces a full GP on J sites with a directed acyclic graph in
which every site conditions on at most ``m`` nearest earlier sites:

    w_i | w_N(i) ~ Normal(B_i . w_N(i), F_i)

so that densities, conditional draws and sweeps cost O(J m^3) instead of
O(J^3). Sites are ordered by ascending coordinate sum (ties by index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from . import _kernels
from .data import CovModel, SiteGeometry
from .exceptions import NumericalError

BRUTE_FORCE_MAX = 200


@dataclass(frozen=True)
class CovParams:
    sigma_sq: float
    phi: float
    nu: float = None

    def __post_init__(self):
        for name in ("sigma_sq", "phi"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be finite and > 0, got {val}")
        if self.nu is not None and not (np.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"nu must be finite and > 0, got {self.nu}")


def correlation(d, phi, model, nu=None):
    """Correlation at distance ``d`` (any shape) for the given covariance model."""
    model = CovModel.parse(model)
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and >= 0")
    if not np.isfinite(phi):
        raise ValueError("phi must be finite")
    if model is CovModel.EXPONENTIAL:
        return np.exp(-phi * d)
    if model is CovModel.GAUSSIAN:
        return np.exp(-(phi * d) ** 2)
    if model is CovModel.SPHERICAL:
        t = phi * d
        return np.where(t < 1.0, 1.0 - 1.5 * t + 0.5 * t ** 3, 0.0)
    if nu is None or not np.isfinite(nu) or nu <= 0:
        raise ValueError("the Matern model needs a positive smoothness nu")
    t = np.sqrt(2.0 * nu) * phi * d
    with np.errstate(invalid="ignore", over="ignore"):
        out = 2.0 ** (1.0 - nu) / gamma_fn(nu) * t ** nu * kv(nu, t)
    out = np.where(t > 0, out, 1.0)
    return np.where(np.isfinite(out), out, 0.0)


def cov_value(d, params, model):
    """Covariance ``C(d)``; equals ``params.sigma_sq`` at ``d = 0`` for every model.

    Matern uses the ``sqrt(2 nu) * phi * d`` scaling.

    >>> round(float(cov_value(2.0, CovParams(2.0, 0.5), "exponential")), 6)
    0.735759
    """
    if not np.all(np.isfinite([params.sigma_sq, params.phi])):
        raise ValueError("non-finite covariance parameters")
    return params.sigma_sq * correlation(d, params.phi, model, params.nu)


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Ordering, neighbor sets and the reverse (children) index of the NNGP DAG.

    ``neighbors[i, :counts[i]]`` lists the neighbors of site ``i`` (original
    indexing); remaining slots hold -1. Children of ``i`` are
    ``child_idx[child_ptr[i]:child_ptr[i+1]]`` with ``i`` sitting at slot
    ``child_pos`` of each child's neighbor list.
    """

    order: np.ndarray
    neighbors: np.ndarray
    counts: np.ndarray
    child_ptr: np.ndarray
    child_idx: np.ndarray
    child_pos: np.ndarray
    dist_site: np.ndarray
    dist_nbr: np.ndarray

    @property
    def n_sites(self):
        return self.order.shape[0]

    @property
    def m(self):
        return self.neighbors.shape[1]

    @property
    def neighbor_sets(self):
        return [self.neighbors[i, :self.counts[i]] for i in range(self.n_sites)]

    def kernel_args(self):
        return (self.neighbors, self.counts)

    def child_args(self):
        return (self.child_ptr, self.child_idx, self.child_pos)


def _coords(geom):
    return geom.coords if isinstance(geom, SiteGeometry) else np.asarray(geom, dtype=np.float64)


def _brute_predecessors(coords, order, rank, m):
    n = coords.shape[0]
    nbr = np.full((n, m), -1, dtype=np.int64)
    for r in range(1, n):
        i = order[r]
        prev = order[:r]
        d = np.hypot(*(coords[prev] - coords[i]).T)
        pick = np.lexsort((prev, d))[:m]
        nbr[i, :pick.size] = prev[pick]
    return nbr


def _tree_predecessors(coords, order, rank, m):
    n = coords.shape[0]
    nbr = np.full((n, m), -1, dtype=np.int64)
    tree = cKDTree(coords)
    pending = np.arange(n)
    # early sites have few predecessors; the doubling loop below terminates at k = n
    k = min(n, 4 * m + 1)
    while pending.size:
        dist, idx = tree.query(coords[pending], k=k)
        dist = np.atleast_2d(dist)
        idx = np.atleast_2d(idx)
        unresolved = []
        for row, i in enumerate(pending):
            need = min(m, rank[i])
            if need == 0:
                continue
            cand = idx[row]
            keep = rank[cand] < rank[i]
            cand, cd = cand[keep], dist[row][keep]
            if cand.size >= need and (k == n or cd[need - 1] < dist[row, -1]):
                pick = np.lexsort((cand, cd))[:need]
                nbr[i, :need] = cand[pick]
            else:
                unresolved.append(i)
        pending = np.asarray(unresolved, dtype=np.int64)
        k = min(n, 2 * k)
    return nbr


def build_neighbor_graph(geom, m):
    """Build the NNGP DAG over the sites of ``geom`` with up to ``m`` neighbors each."""
    coords = _coords(geom)
    if m < 1:
        raise ValueError("m must be >= 1")
    n = coords.shape[0]
    if n < 1:
        raise ValueError("need at least one site")
    if n > 1 and len(cKDTree(coords).query_pairs(1e-12)):
        raise NumericalError("duplicate coordinates")
    order = np.lexsort((np.arange(n), coords[:, 0] + coords[:, 1]))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    m_eff = min(m, n - 1)
    if n <= BRUTE_FORCE_MAX:
        nbr = _brute_predecessors(coords, order, rank, m_eff)
    else:
        nbr = _tree_predecessors(coords, order, rank, m_eff)
    return _assemble(coords, order, nbr)


def _assemble(coords, order, nbr):
    n, m = nbr.shape
    counts = (nbr >= 0).sum(1).astype(np.int64)
    child_site, child_slot = np.nonzero(nbr >= 0)
    parent = nbr[child_site, child_slot]
    srt = np.argsort(parent, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(parent, minlength=n), out=ptr[1:])
    safe = np.where(nbr >= 0, nbr, 0)
    nbr_xy = coords[safe]
    d_site = np.hypot(*(nbr_xy - coords[:, None, :]).transpose(2, 0, 1))
    diff = nbr_xy[:, :, None, :] - nbr_xy[:, None, :, :]
    d_nbr = np.sqrt((diff ** 2).sum(-1))
    return NeighborGraph(order.astype(np.int64), nbr, counts, ptr,
                         child_site[srt].astype(np.int64), child_slot[srt].astype(np.int64),
                         d_site, d_nbr)


def independent_graph(n_sites):
    """Graph with empty neighbor sets (independent standard-normal field)."""
    nbr = np.zeros((n_sites, 0), dtype=np.int64)
    return NeighborGraph(np.arange(n_sites, dtype=np.int64), nbr, np.zeros(n_sites, np.int64),
                         np.zeros(n_sites + 1, np.int64), np.zeros(0, np.int64),
                         np.zeros(0, np.int64), np.zeros((n_sites, 0)), np.zeros((n_sites, 0, 0)))


@dataclass(frozen=True, eq=False)
class NNGPFactor:
    """Conditional weights ``B`` (J, m) and variances ``F`` (J,)."""

    B: np.ndarray
    F: np.ndarray

    def scaled(self, sigma_sq):
        return NNGPFactor(self.B, self.F * sigma_sq)


def correlation_factor(graph, phi, model, nu=None):
    """NNGP factor of the unit-variance correlation function."""
    n, m = graph.n_sites, graph.m
    if m == 0:
        return NNGPFactor(np.zeros((n, 0)), np.ones(n))
    cnn = correlation(graph.dist_nbr, phi, model, nu)
    c = correlation(graph.dist_site, phi, model, nu)
    b, bad = _kernels.batched_cholesky_solve(cnn, c, graph.counts)
    if bad >= 0:
        raise NumericalError("neighbor covariance is not positive definite", site=int(bad))
    f = 1.0 - (b * c).sum(1)
    if np.any(f <= 0):
        raise NumericalError("non-positive conditional variance", site=int(np.argmin(f)))
    return NNGPFactor(b, f)


def nngp_factorize(graph, params, model):
    """Factor ``C~`` into per-site weights and conditional variances."""
    return correlation_factor(graph, params.phi, model, params.nu).scaled(params.sigma_sq)


def _check_field(w, graph):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (graph.n_sites,):
        raise ValueError(f"field has shape {w.shape}, expected ({graph.n_sites},)")
    return w


def nngp_log_density(w, factor, graph):
    """Log density of ``w`` under the NNGP defined by ``factor`` and ``graph``."""
    w = _check_field(w, graph)
    if factor.F.shape != (graph.n_sites,):
        raise ValueError("factor does not match graph")
    r = _kernels.residuals(w, graph.neighbors, graph.counts, factor.B)
    return float(-0.5 * np.sum(np.log(2 * np.pi * factor.F)) - 0.5 * np.sum(r * r / factor.F))


def quadratic_form(w, factor, graph):
    """``sum_i (w_i - B_i w_N(i))^2 / F_i``."""
    r = _kernels.residuals(w, graph.neighbors, graph.counts, factor.B)
    return float(np.sum(r * r / factor.F))


def conditional_moments_for_site(i, w, factor, graph):
    """Mean and variance of ``w[i]`` given every other site under the NNGP."""
    w = _check_field(w, graph)
    mean, var = _kernels.cond_moments(int(i), w, graph.neighbors, graph.counts, factor.B,
                                      factor.F, graph.child_ptr, graph.child_idx,
                                      graph.child_pos)
    return float(mean), float(var)


def nngp_sample(factor, graph, rng):
    """Draw one field sequentially in DAG order."""
    n = graph.n_sites
    z = rng.standard_normal(n)
    w = np.zeros(n)
    sd = np.sqrt(factor.F)
    for r, i in enumerate(graph.order):
        k = graph.counts[i]
        w[i] = factor.B[i, :k] @ w[graph.neighbors[i, :k]] + sd[i] * z[r]
    return w


def dense_covariance(coords, params, model):
    """Full covariance matrix; meant for small J (tests, simulation of small fields)."""
    coords = np.asarray(coords, dtype=np.float64)
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    return cov_value(d, params, model)


def krige(new_coords, coords, w, params, model, m):
    """Predictive mean and variance of the field at new locations.

    Each new location conditions on its ``m`` nearest observed sites.

    Parameters
    ----------
    new_coords : array_like, shape (J0, 2)
    coords : array_like, shape (J, 2)
    w : array_like, shape (J,)
        Field values at the observed sites.
    params : CovParams
    model : CovModel or str
    m : int

    Returns
    -------
    mean, var : ndarray, shape (J0,)
    """
    new_coords = np.asarray(new_coords, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(new_coords)):
        raise ValueError("new coordinates must be finite")
    coords = np.asarray(coords, dtype=np.float64)
    nn = nearest_sites(coords, new_coords, m)
    mean, var = _krige_weights(new_coords, coords, nn, params, model)
    w = np.asarray(w, dtype=np.float64)
    return (mean * w[nn]).sum(1), var


def nearest_sites(coords, new_coords, m):
    k = min(m, coords.shape[0])
    _, nn = cKDTree(coords).query(new_coords, k=k)
    return np.asarray(nn, dtype=np.int64).reshape(new_coords.shape[0], k)


def _krige_weights(new_coords, coords, nn, params, model):
    """Kriging weights ``C_nn^{-1} c_0`` and predictive variances."""
    xy = coords[nn]
    d0 = np.hypot(*(xy - new_coords[:, None, :]).transpose(2, 0, 1))
    dnn = np.sqrt(((xy[:, :, None, :] - xy[:, None, :, :]) ** 2).sum(-1))
    rho = correlation(dnn, params.phi, model, params.nu)
    c0 = correlation(d0, params.phi, model, params.nu)
    counts = np.full(nn.shape[0], nn.shape[1], dtype=np.int64)
    weights, bad = _kernels.batched_cholesky_solve(rho, c0, counts)
    if bad >= 0:
        raise NumericalError("neighbor covariance is not positive definite", site=int(bad))
    var = params.sigma_sq * np.maximum(1.0 - (weights * c0).sum(1), 0.0)
    return weights, var
