"""Distance-sampling detection geometry.

Detection decays with distance ``x`` from the line or point via ``g(x)``
with a site-level scale ``sigma``. For distance band ``k`` with limits
``b_k < b_{k+1}`` and truncation distance ``B``:

* ``psi_k``  probability an individual lies in band ``k``
* ``pbar_k`` mean detection probability within band ``k``
* ``pi_k = pbar_k * psi_k`` and ``pi_miss = 1 - sum(pi)``

Band averages use a fixed 20-node Gauss-Legendre rule per band.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .data import DetectionFn, SurveyType

N_NODES = 20


def detect_g(x, sigma, fn):
    """Detection probability at distance ``x`` for scale ``sigma``."""
    fn = DetectionFn.parse(fn)
    x = np.asarray(x, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if fn is DetectionFn.HALF_NORMAL:
        return np.exp(-x * x / (2.0 * sigma * sigma))
    return np.exp(-x / sigma)


def _cut(cutpoints):
    cut = np.asarray(cutpoints, dtype=np.float64)
    if cut.ndim != 1 or cut.size < 2 or cut[0] != 0 or np.any(np.diff(cut) <= 0):
        raise ValueError("cutpoints must start at 0 and increase strictly")
    return cut


def band_psi(cutpoints, k=None, survey=SurveyType.POINT):
    """Probability of occurring in band ``k`` (all bands if ``k`` is None)."""
    cut = _cut(cutpoints)
    survey = SurveyType.parse(survey)
    if survey is SurveyType.LINE:
        psi = np.diff(cut) / cut[-1]
    else:
        psi = np.diff(cut ** 2) / cut[-1] ** 2
    return psi if k is None else float(psi[k])


@lru_cache(maxsize=64)
def _plan(cut_key, survey):
    """Quadrature nodes (K, n) and weights (K, n) folding in the band normalizer."""
    cut = np.array(cut_key)
    x, w = np.polynomial.legendre.leggauss(N_NODES)
    lo, hi = cut[:-1, None], cut[1:, None]
    nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * w
    if survey is SurveyType.LINE:
        weights = weights / (hi - lo)
    else:
        weights = weights * 2.0 * nodes / (hi ** 2 - lo ** 2)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def quadrature_plan(cutpoints, survey):
    return _plan(tuple(_cut(cutpoints).tolist()), SurveyType.parse(survey))


def _pbar_all(cutpoints, sigma, fn, survey):
    nodes, weights = quadrature_plan(cutpoints, survey)
    sigma = np.asarray(sigma, dtype=np.float64)[..., None, None]
    g = detect_g(nodes, sigma, fn)
    return (g * weights).sum(-1)


def band_pbar(cutpoints, k, sigma, fn, survey):
    """Mean detection probability within band ``k`` (vectorized over ``sigma``)."""
    out = _pbar_all(cutpoints, sigma, fn, survey)[..., k]
    return float(out) if np.ndim(out) == 0 else out


class CellProbabilities(NamedTuple):
    pi: np.ndarray
    pi_miss: np.ndarray


def cell_probabilities(cutpoints, sigma, fn, survey):
    """Multinomial cell probabilities ``(pi, pi_miss)``; ``sigma`` may be an array."""
    psi = band_psi(cutpoints, None, survey)
    pi = _pbar_all(cutpoints, sigma, fn, survey) * psi
    pi = np.clip(pi, 0.0, psi)
    return CellProbabilities(pi, 1.0 - pi.sum(-1))
