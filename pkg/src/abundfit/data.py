"""Domain types, CSV ingestion and structural validation.

All model families consume the same small set of immutable containers:
a :class:`SiteGeometry` plus one of the observation designs
(:class:`DistanceDesign`, :class:`CountDesign`, :class:`ContinuousDesign`),
optionally wrapped in a :class:`MultiSpeciesStack`.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_bounds, check_coords, check_matrix
from .exceptions import ConfigError, DataError

MISSING = -1
COINCIDENT_TOL = 1e-12
INTERCEPT = "(Intercept)"


class _Choice(str, enum.Enum):
    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key or member.name.replace("_", "").lower() == key:
                return member
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"invalid {cls.__name__} {value!r}; expected one of {choices}")


class Family(_Choice):
    HDS = "HDS"
    NMIX = "NMIX"
    GLMM = "GLMM"


class AbundanceDist(_Choice):
    POISSON = "Poisson"
    NEGBIN = "NegBinomial"
    GAUSSIAN = "Gaussian"


class DetectionFn(_Choice):
    HALF_NORMAL = "HalfNormal"
    NEG_EXP = "NegExponential"


class SpeciesCorrelation(_Choice):
    NONE = "none"
    LATENT = "latentFactor"
    SPATIAL = "spatialFactor"


class CovModel(_Choice):
    EXPONENTIAL = "exponential"
    SPHERICAL = "spherical"
    GAUSSIAN = "gaussian"
    MATERN = "matern"


class SurveyType(_Choice):
    LINE = "line"
    POINT = "point"


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class SiteGeometry:
    """Planar site coordinates and area offsets.

    Parameters
    ----------
    coords : array_like, shape (J, 2)
    offset : array_like, shape (J,), optional
        Positive multiplier converting mean abundance to density units.
        Defaults to ones.
    ids : sequence of str, optional
    """

    coords: np.ndarray
    offset: np.ndarray = None
    ids: tuple = None

    def __post_init__(self):
        coords = check_coords(self.coords)
        n_sites = coords.shape[0]
        if n_sites < 1:
            raise DataError("at least one site is required")
        offset = np.ones(n_sites) if self.offset is None else np.asarray(self.offset, float)
        if offset.shape != (n_sites,):
            raise DataError(f"offset has shape {offset.shape}, expected ({n_sites},)")
        if not np.all(np.isfinite(offset)) or np.any(offset <= 0):
            bad = int(np.flatnonzero(~(offset > 0))[0]) + 1
            raise DataError("offsets must be finite and > 0", row=bad)
        ids = tuple(str(i) for i in (range(1, n_sites + 1) if self.ids is None else self.ids))
        if len(ids) != n_sites:
            raise DataError("ids length does not match number of sites")
        if n_sites > 1:
            pairs = cKDTree(coords).query_pairs(COINCIDENT_TOL, output_type="ndarray")
            if len(pairs):
                i, j = sorted(pairs[0])
                raise DataError(f"sites {ids[i]} and {ids[j]} have coincident coordinates",
                                row=j + 1)
        coords.setflags(write=False)
        offset.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "ids", ids)

    @property
    def n_sites(self):
        return self.coords.shape[0]

    def distance_range(self):
        """Smallest and largest inter-site distance (without forming a J x J matrix)."""
        if self.n_sites < 2:
            return 1.0, 1.0
        tree = cKDTree(self.coords)
        d, _ = tree.query(self.coords, k=2)
        d_min = float(d[:, 1].min())
        pts = self.coords
        if self.n_sites > 3:
            from scipy.spatial import ConvexHull, QhullError
            try:
                pts = pts[ConvexHull(pts).vertices]
            except QhullError:
                pass
        diff = pts[:, None, :] - pts[None, :, :]
        d_max = float(np.sqrt((diff ** 2).sum(-1)).max())
        return d_min, d_max


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Covariates with an injected intercept and optional standardization.

    ``raw`` holds covariates exactly as read (no intercept); ``values`` is the
    model matrix used in fitting. Site-level matrices are (J, p); replicate-level
    detection covariates are (J, K, p).
    """

    raw: np.ndarray
    names: tuple = ()
    standardize: bool = True
    mask: np.ndarray = None
    values: np.ndarray = field(init=False)
    center: np.ndarray = field(init=False)
    scale: np.ndarray = field(init=False)

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim == 1:
            raw = raw[:, None]
        if raw.shape[-1] == 0:
            raw = raw.reshape(raw.shape[:-1] + (0,))
        names = tuple(str(n) for n in self.names)
        if len(names) != raw.shape[-1]:
            names = tuple(f"x{k + 1}" for k in range(raw.shape[-1]))
        flat = raw.reshape(int(np.prod(raw.shape[:-1])), raw.shape[-1])
        if self.mask is not None:
            flat = flat[np.asarray(self.mask, bool).reshape(-1)]
        if not np.all(np.isfinite(flat)):
            raise DataError("covariates contain non-finite values")
        center = np.zeros(raw.shape[-1])
        scale = np.ones(raw.shape[-1])
        if self.standardize and flat.shape[0] > 1:
            sd = flat.std(axis=0, ddof=1)
            ok = sd > 0
            center[ok] = flat.mean(axis=0)[ok]
            scale[ok] = sd[ok]
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "center", np.concatenate([[0.0], center]))
        object.__setattr__(self, "scale", np.concatenate([[1.0], scale]))
        object.__setattr__(self, "values", self.transform(raw))
        self.values.setflags(write=False)

    @property
    def columns(self):
        return (INTERCEPT,) + self.names

    @property
    def n_columns(self):
        return len(self.names) + 1

    def transform(self, raw):
        """Standardize new raw covariates with the training moments and add the intercept."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 1 and len(self.names) <= 1 and raw.shape[0] != len(self.names):
            raw = raw[..., None]
        if raw.shape[-1] != len(self.names):
            raise DataError(f"expected {len(self.names)} covariates {self.names}, got {raw.shape[-1]}")
        std = (raw - self.center[1:]) / self.scale[1:]
        ones = np.ones(raw.shape[:-1] + (1,))
        return np.concatenate([ones, std], axis=-1)

    def rank_deficient(self):
        flat = self.values.reshape(-1, self.n_columns)
        if self.mask is not None:
            flat = flat[np.asarray(self.mask, bool).reshape(-1)]
        return np.linalg.matrix_rank(flat) < self.n_columns


def destandardize_coefficients(coef, design):
    """Map coefficients fitted on standardized covariates to the raw scale.

    ``coef`` may have leading batch axes; the last axis indexes columns.
    """
    coef = np.asarray(coef, dtype=np.float64)
    slopes = coef[..., 1:] / design.scale[1:]
    intercept = coef[..., :1] - (slopes * design.center[1:]).sum(-1, keepdims=True)
    return np.concatenate([intercept, slopes], axis=-1)


def _as_design(covs, n_sites, name, mask=None):
    if isinstance(covs, DesignMatrix):
        return covs
    if covs is None:
        covs = np.zeros((n_sites, 0))
    return DesignMatrix(check_matrix(covs, n_sites, name, allow_3d=True), mask=mask)


@dataclass(frozen=True, eq=False)
class DistanceDesign:
    """Binned distance-sampling counts for one species."""

    counts: np.ndarray
    cutpoints: np.ndarray
    survey_type: SurveyType
    abund_covs: DesignMatrix = None
    det_covs: DesignMatrix = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise DataError(f"distance counts must be J x K, got shape {counts.shape}")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0) or np.any(counts != np.round(counts)):
            bad = int(np.flatnonzero(~((counts >= 0) & (counts == np.round(counts))).all(1))[0]) + 1
            raise DataError("distance counts must be finite non-negative integers", row=bad)
        cut = np.asarray(self.cutpoints, dtype=np.float64)
        if cut.ndim != 1 or cut.size < 2 or cut[0] != 0 or np.any(np.diff(cut) <= 0):
            raise DataError(f"cutpoints must start at 0 and be strictly increasing, got {cut.tolist()}")
        if cut.size - 1 != counts.shape[1]:
            raise DataError(f"{cut.size - 1} distance bands in cutpoints but {counts.shape[1]} count columns")
        n_sites = counts.shape[0]
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "cutpoints", cut)
        object.__setattr__(self, "survey_type", SurveyType.parse(self.survey_type))
        object.__setattr__(self, "abund_covs", _as_design(self.abund_covs, n_sites, "abund_covs"))
        object.__setattr__(self, "det_covs", _as_design(self.det_covs, n_sites, "det_covs"))
        if self.det_covs.values.ndim != 2:
            raise DataError("distance-sampling detection covariates are site-level only")

    @property
    def n_sites(self):
        return self.counts.shape[0]

    @property
    def n_bands(self):
        return self.counts.shape[1]

    @property
    def max_distance(self):
        return float(self.cutpoints[-1])


@dataclass(frozen=True, eq=False)
class CountDesign:
    """Replicated counts for N-mixture models; missing surveys hold ``MISSING``."""

    counts: np.ndarray
    abund_covs: DesignMatrix = None
    det_covs: DesignMatrix = None

    def __post_init__(self):
        raw = np.asarray(self.counts, dtype=np.float64)
        if raw.ndim != 2:
            raise DataError(f"replicate counts must be J x K, got shape {raw.shape}")
        missing = np.isnan(raw) | (raw == MISSING)
        filled = np.where(missing, 0, raw)
        if np.any(filled < 0) or np.any(filled != np.round(filled)) or not np.all(np.isfinite(filled)):
            bad = int(np.flatnonzero(((filled < 0) | (filled != np.round(filled))).any(1))[0]) + 1
            raise DataError("replicate counts must be non-negative integers", row=bad)
        n_surveys = (~missing).sum(1)
        trailing = np.arange(raw.shape[1])[None, :] >= n_surveys[:, None]
        if np.any(missing != trailing):
            bad = int(np.flatnonzero((missing != trailing).any(1))[0]) + 1
            raise DataError("missing surveys must come after all observed surveys", row=bad)
        if np.any(n_surveys < 1):
            bad = int(np.flatnonzero(n_surveys < 1)[0]) + 1
            raise DataError("every site needs at least one survey", row=bad)
        if not np.any(n_surveys >= 2):
            raise DataError("no replicated site: at least one site must be surveyed more than once")
        counts = np.where(missing, MISSING, filled).astype(np.int64)
        n_sites, k_max = counts.shape
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "abund_covs", _as_design(self.abund_covs, n_sites, "abund_covs"))
        det = self.det_covs
        if not isinstance(det, DesignMatrix):
            det = np.zeros((n_sites, k_max, 0)) if det is None else np.asarray(det, float)
            if det.ndim == 2:
                det = np.repeat(det[:, None, :], k_max, axis=1)
            det = DesignMatrix(np.where(missing[..., None], 0.0, det), mask=~missing)
        if det.values.shape[:2] != (n_sites, k_max):
            raise DataError("detection covariates must be J x K x p")
        object.__setattr__(self, "det_covs", det)

    @property
    def n_sites(self):
        return self.counts.shape[0]

    @property
    def observed(self):
        return self.counts != MISSING

    @property
    def surveys_per_site(self):
        return self.observed.sum(1)


@dataclass(frozen=True, eq=False)
class ContinuousDesign:
    """Directly observed abundance (counts or continuous, e.g. biomass)."""

    response: np.ndarray
    abund_covs: DesignMatrix = None
    groups: np.ndarray = None
    group_labels: tuple = None

    def __post_init__(self):
        y = np.asarray(self.response, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y))[0]) + 1
            raise DataError("response must be finite", row=bad)
        n_sites = y.size
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "abund_covs", _as_design(self.abund_covs, n_sites, "abund_covs"))
        if self.groups is not None:
            labels, codes = np.unique(np.asarray(self.groups).astype(str), return_inverse=True)
            if self.group_labels is not None:
                labels = np.asarray(self.group_labels, dtype=str)
                lookup = {g: k for k, g in enumerate(labels)}
                codes = np.array([lookup[g] for g in np.asarray(self.groups).astype(str)])
            if codes.shape != (n_sites,):
                raise DataError("groups must have one label per site")
            object.__setattr__(self, "groups", codes.astype(np.int64))
            object.__setattr__(self, "group_labels", tuple(labels.tolist()))

    @property
    def n_sites(self):
        return self.response.size

    @property
    def is_integer(self):
        return bool(np.all(self.response >= 0) and np.all(self.response == np.round(self.response)))


@dataclass(frozen=True, eq=False)
class MultiSpeciesStack:
    """Per-species copies of one design type sharing geometry and covariates."""

    species: tuple
    designs: tuple

    def __post_init__(self):
        designs = tuple(self.designs)
        species = tuple(str(s) for s in self.species)
        if len(designs) < 1 or len(species) != len(designs):
            raise DataError("need one design per species and at least one species")
        kind = type(designs[0])
        first = designs[0]
        for d in designs[1:]:
            if type(d) is not kind or d.n_sites != first.n_sites:
                raise DataError("all species must share the same design type and sites")
            if not np.array_equal(d.abund_covs.values, first.abund_covs.values):
                raise DataError("all species must share abundance covariates")
            if kind is DistanceDesign and not np.array_equal(d.cutpoints, first.cutpoints):
                raise DataError("all species must share distance cutpoints")
            if kind is CountDesign and not np.array_equal(d.observed, first.observed):
                raise DataError("all species must share the survey pattern")
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "designs", designs)

    @property
    def n_species(self):
        return len(self.species)

    @property
    def n_sites(self):
        return self.designs[0].n_sites

    @property
    def first(self):
        return self.designs[0]


def as_stack(data):
    """Wrap a single-species design as a one-species stack."""
    if isinstance(data, MultiSpeciesStack):
        return data
    return MultiSpeciesStack(("species1",), (data,))


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class PriorSet:
    """Prior hyperparameters. ``None`` bounds for ``phi`` resolve from the site geometry."""

    coef_mean: float = 0.0
    coef_var: float = 100.0
    comm_var_shape: float = 0.1
    comm_var_rate: float = 0.1
    sigma_sq_shape: float = 2.0
    sigma_sq_rate: float = 1.0
    phi_bounds: tuple = None
    nu_bounds: tuple = (0.1, 2.5)
    kappa_bounds: tuple = (0.01, 100.0)
    loading_var: float = 1.0
    resid_var_shape: float = 0.01
    resid_var_rate: float = 0.01
    re_var_shape: float = 0.1
    re_var_rate: float = 0.1

    def problems(self):
        out = []
        for name in ("coef_var", "comm_var_shape", "comm_var_rate", "sigma_sq_shape",
                     "sigma_sq_rate", "loading_var", "resid_var_shape", "resid_var_rate",
                     "re_var_shape", "re_var_rate"):
            if not getattr(self, name) > 0:
                out.append(f"prior {name} must be > 0")
        for name in ("phi_bounds", "nu_bounds", "kappa_bounds"):
            bounds = getattr(self, name)
            if bounds is None:
                continue
            try:
                lo, _ = check_bounds(bounds, name)
            except (TypeError, ValueError) as exc:
                out.append(str(exc))
                continue
            if lo <= 0:
                out.append(f"prior {name} lower bound must be > 0")
        return out

    def resolve_phi(self, geometry):
        if self.phi_bounds is not None:
            return check_bounds(self.phi_bounds, "phi_bounds")
        d_min, d_max = geometry.distance_range()
        return 3.0 / d_max, 3.0 / d_min


@dataclass(frozen=True)
class MCMCSettings:
    """Chain layout. ``n_iter`` counts every iteration, burn-in included."""

    n_chains: int = 1
    n_iter: int = 5000
    n_burn: int = 2500
    thin: int = 1
    batch_length: int = 50
    seed: int = 0

    @property
    def n_stored(self):
        return max(0, -(-(self.n_iter - self.n_burn) // self.thin))


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    abundance_dist: AbundanceDist = AbundanceDist.POISSON
    detection_fn: DetectionFn = None
    spatial: bool = False
    species_correlation: SpeciesCorrelation = SpeciesCorrelation.NONE
    factor_count: int = 1
    cov_model: CovModel = CovModel.EXPONENTIAL
    neighbor_count: int = 15
    priors: PriorSet = PriorSet()
    mcmc: MCMCSettings = MCMCSettings()
    cutpoints: tuple = None
    survey_type: SurveyType = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "abundance_dist", AbundanceDist.parse(self.abundance_dist))
        if self.detection_fn is not None:
            object.__setattr__(self, "detection_fn", DetectionFn.parse(self.detection_fn))
        object.__setattr__(self, "species_correlation",
                           SpeciesCorrelation.parse(self.species_correlation))
        object.__setattr__(self, "cov_model", CovModel.parse(self.cov_model))
        if self.survey_type is not None:
            object.__setattr__(self, "survey_type", SurveyType.parse(self.survey_type))
        if self.cutpoints is not None:
            object.__setattr__(self, "cutpoints", tuple(float(c) for c in self.cutpoints))

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    message: str

    def __str__(self):
        return f"{self.level}: {self.message}"


_DESIGN_FOR = {Family.HDS: DistanceDesign, Family.NMIX: CountDesign, Family.GLMM: ContinuousDesign}


def validate_spec(spec, data=None):
    """Check a :class:`ModelSpec` against its invariants and the data.

    Returns a list of :class:`Diagnostic`; the list is empty iff everything holds.
    """
    out = []

    def error(msg):
        out.append(Diagnostic("error", msg))

    def warn(msg):
        out.append(Diagnostic("warning", msg))

    fam = spec.family
    if spec.abundance_dist is AbundanceDist.GAUSSIAN and fam is not Family.GLMM:
        error("Gaussian requires GLMM: latent abundance is integer-valued")
    if fam is Family.HDS and spec.detection_fn is None:
        error("detectionFn is required for HDS models")
    if fam is not Family.HDS and spec.detection_fn is not None:
        error("detectionFn only applies to HDS models")
    corr = spec.species_correlation
    if corr is SpeciesCorrelation.SPATIAL and not spec.spatial:
        error("spatialFactor requires spatial=true")
    if corr is SpeciesCorrelation.LATENT and spec.spatial:
        error("latentFactor models are non-spatial; use spatialFactor for spatial=true")
    if spec.neighbor_count < 1:
        error("neighborCount must be >= 1")
    for msg in spec.priors.problems():
        error(msg)

    if data is None:
        return out
    stack = as_stack(data)
    expected = _DESIGN_FOR[fam]
    if not isinstance(stack.first, expected):
        error(f"{fam.value} requires {expected.__name__}, got {type(stack.first).__name__}")
        return out
    n_species = stack.n_species
    if corr is not SpeciesCorrelation.NONE:
        q = spec.factor_count
        if q < 1 or q > n_species:
            error(f"factorCount must satisfy 1 <= q <= I = {n_species}, got {q}")
        elif q == n_species and n_species > 1:
            warn(f"factorCount q = I = {n_species}: loadings are weakly identified")
    elif spec.spatial and n_species > 1:
        error("multi-species spatial models require speciesCorrelation=spatialFactor")
    if n_species > 1 and n_species < 6:
        warn(f"hierarchical community model with I={n_species} species; "
             "reliable variance estimation requires at least 5-6 species")
    if fam is Family.HDS:
        d = stack.first
        if spec.cutpoints is not None and not np.allclose(spec.cutpoints, d.cutpoints):
            error("spec cutpoints differ from data cutpoints")
    if fam is Family.GLMM:
        if spec.abundance_dist is not AbundanceDist.GAUSSIAN:
            for s, d in zip(stack.species, stack.designs):
                if not d.is_integer:
                    error(f"{spec.abundance_dist.value} response for species {s} "
                          "must be non-negative integers")
        d = stack.first
        if d.groups is not None and len(d.group_labels) < 2:
            warn("random intercept with a single group is not identified "
                 "separately from the fixed intercept")
    for design in (stack.first.abund_covs, getattr(stack.first, "det_covs", None)):
        if design is not None and design.rank_deficient():
            warn("rank-deficient design: covariate columns are linearly dependent")
    return out


def raise_for_errors(diagnostics):
    errors = [d.message for d in diagnostics if d.level == "error"]
    for d in diagnostics:
        if d.level == "warning":
            warnings.warn(d.message, stacklevel=3)
    if errors:
        raise ConfigError("; ".join(errors))


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path, required_prefix):
    """Yield (row_number, record) one line at a time after validating the header."""
    path = Path(path)
    if not path.is_file():
        raise DataError("file not found", path=path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("file is empty", path=path) from None
        for pos, name in enumerate(required_prefix):
            found = header[pos] if pos < len(header) else None
            if found != name:
                raise DataError(f"schema mismatch: expected column '{name}' at position "
                                f"{pos + 1}, found {found!r}", path=path)
        yield header
        for row_no, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"expected {len(header)} fields, found {len(rec)}",
                                path=path, row=row_no)
            yield row_no, [c.strip() for c in rec]


def _float(text, path, row, what):
    try:
        val = float(text)
    except ValueError:
        raise DataError(f"{what}: cannot parse {text!r} as a number", path=path, row=row) from None
    if not np.isfinite(val):
        raise DataError(f"{what}: non-finite value", path=path, row=row)
    return val


def read_sites(path):
    rows = _read_rows(path, ("id", "x", "y"))
    header = next(rows)
    has_offset = "offset" in header
    ids, coords, offset = [], [], []
    for row, rec in rows:
        if rec[1] == "" or rec[2] == "":
            raise DataError("missing coordinate", path=path, row=row)
        ids.append(rec[0])
        coords.append((_float(rec[1], path, row, "x"), _float(rec[2], path, row, "y")))
        if has_offset:
            off = _float(rec[header.index("offset")], path, row, "offset")
            if off <= 0:
                raise DataError("offset must be > 0", path=path, row=row)
            offset.append(off)
    if not ids:
        raise DataError("no sites", path=path)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate site ids", path=path)
    return SiteGeometry(np.array(coords), np.array(offset) if has_offset else None, tuple(ids))


def _index(ids):
    return {s: k for k, s in enumerate(ids)}


def read_covariates(path, ids, names=None, replicate=False, n_reps=None):
    """Read site (or site x replicate) covariates, selecting ``names`` in order."""
    prefix = ("id", "rep") if replicate else ("id",)
    rows = _read_rows(path, prefix)
    header = next(rows)
    avail = header[len(prefix):]
    names = list(avail if names is None else names)
    for n in names:
        if n not in avail:
            raise DataError(f"covariate {n!r} not found; available: {avail}", path=path)
    cols = [header.index(n) for n in names]
    lookup = _index(ids)
    if replicate:
        out = np.full((len(ids), n_reps, len(names)), np.nan)
    else:
        out = np.full((len(ids), len(names)), np.nan)
    for row, rec in rows:
        if rec[0] not in lookup:
            raise DataError(f"unknown site id {rec[0]!r}", path=path, row=row)
        vals = [_float(rec[c], path, row, header[c]) for c in cols]
        if replicate:
            rep = int(_float(rec[1], path, row, "rep"))
            if not 1 <= rep <= n_reps:
                raise DataError(f"replicate {rep} out of range 1..{n_reps}", path=path, row=row)
            out[lookup[rec[0]], rep - 1] = vals
        else:
            out[lookup[rec[0]]] = vals
    return out, tuple(names), avail


def _count_columns(header, prefix, path):
    cols = header[len(prefix):]
    for k, c in enumerate(cols, start=1):
        if c not in (f"band_{k}", f"rep_{k}"):
            raise DataError(f"schema mismatch: expected column 'band_{k}' or 'rep_{k}' at "
                            f"position {len(prefix) + k}, found {c!r}", path=path)
    return len(cols)


def _parse_count(text, path, row, allow_missing):
    if text == "":
        if allow_missing:
            return np.nan
        raise DataError("missing count", path=path, row=row)
    val = _float(text, path, row, "count")
    if val < 0:
        raise DataError("negative count", path=path, row=row)
    if val != round(val):
        raise DataError("non-integer count", path=path, row=row)
    return val


def read_counts(path, ids, species_column=False, allow_missing=False, response=False):
    """Stream wide count rows (``band_k``/``rep_k`` or a single ``y``) into an array.

    Returns ``(species, array)`` where array is (I, J, K) or (I, J) for responses.
    """
    prefix = ("species", "id") if species_column else ("id",)
    rows = _read_rows(path, prefix)
    header = next(rows)
    if response:
        if header[len(prefix):] != ["y"]:
            raise DataError(f"schema mismatch: expected column 'y' at position {len(prefix) + 1}",
                            path=path)
        n_cols = 1
    else:
        n_cols = _count_columns(header, prefix, path)
    lookup = _index(ids)
    blocks = {}
    for row, rec in rows:
        sp = rec[0] if species_column else "species1"
        site = rec[len(prefix) - 1]
        if site not in lookup:
            raise DataError(f"unknown site id {site!r}", path=path, row=row)
        if sp not in blocks:
            blocks[sp] = np.full((len(ids), n_cols), np.nan)
        block = blocks[sp]
        j = lookup[site]
        if not np.all(np.isnan(block[j])):
            raise DataError(f"duplicate row for site {site!r}", path=path, row=row)
        if response:
            block[j, 0] = _float(rec[-1], path, row, "y")
        else:
            vals = [_parse_count(t, path, row, allow_missing) for t in rec[len(prefix):]]
            if allow_missing and all(np.isnan(vals)):
                raise DataError("site has no observed survey", path=path, row=row)
            block[j] = vals
    if not blocks:
        raise DataError("no count rows", path=path)
    species = tuple(blocks)
    arr = np.stack([blocks[s] for s in species])
    for s, block in zip(species, arr):
        rows_missing = np.all(np.isnan(block), axis=1)
        if np.any(rows_missing):
            j = int(np.flatnonzero(rows_missing)[0])
            raise DataError(f"no counts for site {ids[j]!r} (species {s})", path=path)
    return species, (arr[..., 0] if response else arr)


def load_dataset(paths, spec, abund_cov_names=None, det_cov_names=None, group_column=None,
                 standardize=(True, True)):
    """Read a dataset described by file ``paths`` for the model ``spec``.

    Parameters
    ----------
    paths : mapping
        Keys ``sites``, ``counts`` (or ``counts_species`` for long-form
        multi-species data), and optionally ``abund_covs`` and ``det_covs``.
    spec : ModelSpec
    abund_cov_names, det_cov_names : sequence of str, optional
        Covariate columns to use (default: all).
    group_column : str, optional
        Column of ``abund_covs.csv`` holding random-intercept group labels (GLMM).
    standardize : (bool, bool)
        Standardize abundance / detection covariates.

    Returns
    -------
    data, geometry
    """
    geometry = read_sites(paths["sites"])
    ids = geometry.ids
    n_sites = len(ids)
    fam = spec.family
    multi = "counts_species" in paths
    count_path = paths["counts_species"] if multi else paths["counts"]
    species, counts = read_counts(count_path, ids, species_column=multi,
                                  allow_missing=fam is Family.NMIX,
                                  response=fam is Family.GLMM)

    groups = None
    if "abund_covs" in paths:
        names = abund_cov_names
        if group_column is not None and names is None:
            names = [n for n in _header(paths["abund_covs"])[1:] if n != group_column]
        raw, names, _ = read_covariates(paths["abund_covs"], ids, names)
        if group_column is not None:
            groups = _read_labels(paths["abund_covs"], ids, group_column)
        if np.any(np.isnan(raw)):
            j = int(np.flatnonzero(np.isnan(raw).any(1))[0])
            raise DataError(f"no abundance covariates for site {ids[j]!r}", path=paths["abund_covs"])
    else:
        raw, names = np.zeros((n_sites, 0)), ()
    abund = DesignMatrix(raw, names, standardize[0])

    designs = []
    if fam is Family.HDS:
        if spec.cutpoints is None or spec.survey_type is None:
            raise ConfigError("HDS models need cutpoints and surveyType in the model block")
        det = _site_det(paths, ids, det_cov_names, standardize[1])
        for block in counts:
            designs.append(DistanceDesign(block, spec.cutpoints, spec.survey_type, abund, det))
    elif fam is Family.NMIX:
        observed = ~np.isnan(counts[0])
        k_max = counts.shape[-1]
        if "det_covs" in paths:
            header = _header(paths["det_covs"])
            if len(header) > 1 and header[1] == "rep":
                raw_det, dnames, _ = read_covariates(paths["det_covs"], ids, det_cov_names,
                                                     replicate=True, n_reps=k_max)
            else:
                site_raw, dnames, _ = read_covariates(paths["det_covs"], ids, det_cov_names)
                raw_det = np.repeat(site_raw[:, None, :], k_max, axis=1)
            gap = np.isnan(raw_det).any(-1) & observed
            if np.any(gap):
                j = int(np.flatnonzero(gap.any(1))[0])
                raise DataError(f"missing detection covariates for site {ids[j]!r}",
                                path=paths["det_covs"])
            raw_det = np.where(observed[..., None], raw_det, 0.0)
        else:
            raw_det, dnames = np.zeros((n_sites, k_max, 0)), ()
        det = DesignMatrix(raw_det, dnames, standardize[1], mask=observed)
        for block in counts:
            designs.append(CountDesign(np.where(np.isnan(block), MISSING, block), abund, det))
    else:
        for block in counts:
            designs.append(ContinuousDesign(block, abund, groups))
    data = designs[0] if not multi else MultiSpeciesStack(species, tuple(designs))
    return data, geometry


def _header(path):
    path = Path(path)
    if not path.is_file():
        raise DataError("file not found", path=path)
    with path.open(newline="") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _read_labels(path, ids, column):
    rows = _read_rows(path, ("id",))
    header = next(rows)
    if column not in header:
        raise DataError(f"group column {column!r} not found", path=path)
    col = header.index(column)
    lookup = _index(ids)
    out = [None] * len(ids)
    for row, rec in rows:
        out[lookup[rec[0]]] = rec[col]
    return np.array(out, dtype=str)


def _site_det(paths, ids, names, standardize):
    if "det_covs" not in paths:
        return DesignMatrix(np.zeros((len(ids), 0)), (), standardize)
    raw, names, _ = read_covariates(paths["det_covs"], ids, names)
    if np.any(np.isnan(raw)):
        j = int(np.flatnonzero(np.isnan(raw).any(1))[0])
        raise DataError(f"no detection covariates for site {ids[j]!r}", path=paths["det_covs"])
    return DesignMatrix(raw, names, standardize)


# ---------------------------------------------------------------------------
# CSV output (same schema the loader reads)


def _fmt(x):
    return format(float(x), ".17g")


def write_dataset(directory, data, geometry):
    """Write ``data`` and ``geometry`` as CSV files; returns the ``paths`` mapping."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stack = as_stack(data)
    first = stack.first
    ids = geometry.ids
    paths = {"sites": directory / "sites.csv"}
    with paths["sites"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "offset"])
        for i, (x, y), off in zip(ids, geometry.coords, geometry.offset):
            w.writerow([i, _fmt(x), _fmt(y), _fmt(off)])

    abund = first.abund_covs
    groups = getattr(first, "groups", None)
    if abund.names or groups is not None:
        paths["abund_covs"] = directory / "abund_covs.csv"
        with paths["abund_covs"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *abund.names] + (["group"] if groups is not None else []))
            for j, i in enumerate(ids):
                extra = [first.group_labels[groups[j]]] if groups is not None else []
                w.writerow([i, *map(_fmt, abund.raw[j])] + extra)

    det = getattr(first, "det_covs", None)
    if det is not None and det.names:
        paths["det_covs"] = directory / "det_covs.csv"
        with paths["det_covs"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if det.raw.ndim == 3:
                w.writerow(["id", "rep", *det.names])
                obs = first.observed
                for j, i in enumerate(ids):
                    for k in range(det.raw.shape[1]):
                        if obs[j, k]:
                            w.writerow([i, k + 1, *map(_fmt, det.raw[j, k])])
            else:
                w.writerow(["id", *det.names])
                for j, i in enumerate(ids):
                    w.writerow([i, *map(_fmt, det.raw[j])])

    multi = isinstance(data, MultiSpeciesStack)
    if isinstance(first, DistanceDesign):
        name, cols = "counts_distance.csv", [f"band_{k + 1}" for k in range(first.n_bands)]
    elif isinstance(first, CountDesign):
        name, cols = "counts_replicate.csv", [f"rep_{k + 1}" for k in range(first.counts.shape[1])]
    else:
        name, cols = "response.csv", ["y"]
    key = "counts_species" if multi else "counts"
    if multi:
        name = "counts_species.csv"
    paths[key] = directory / name
    with paths[key].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["species"] if multi else []) + ["id", *cols])
        for sp, d in zip(stack.species, stack.designs):
            for j, i in enumerate(ids):
                lead = [sp] if multi else []
                if isinstance(d, ContinuousDesign):
                    w.writerow(lead + [i, _fmt(d.response[j])])
                else:
                    row = ["" if c == MISSING else str(int(c)) for c in d.counts[j]]
                    w.writerow(lead + [i, *row])
    return {k: str(v) for k, v in paths.items()}
