"""Bayesian hierarchical abundance models with NNGP spatial effects."""

from .data import (AbundanceDist, ContinuousDesign, CountDesign, CovModel, DesignMatrix,
                   DetectionFn, DistanceDesign, Family, MCMCSettings, ModelSpec,
                   MultiSpeciesStack, PriorSet, SiteGeometry, SpeciesCorrelation, SurveyType,
                   load_dataset, validate_spec, write_dataset)
from .diagnostics import ess, ppc, rhat, summarize, waic
from .exceptions import AbundfitError, ConfigError, DataError, NumericalError
from .models import (AbundanceGLMM, DistanceSampling, FitResult, NMixture, fit_glmm, fit_hds,
                     fit_nmix)
from .simulate import SimTruth, sim_dataset

__version__ = "0.1.0"

__all__ = [
    "AbundanceDist", "ContinuousDesign", "CountDesign", "CovModel", "DesignMatrix",
    "DetectionFn", "DistanceDesign", "Family", "MCMCSettings", "ModelSpec",
    "MultiSpeciesStack", "PriorSet", "SiteGeometry", "SpeciesCorrelation", "SurveyType",
    "load_dataset", "validate_spec", "write_dataset", "ess", "ppc", "rhat", "summarize", "waic",
    "AbundfitError", "ConfigError", "DataError", "NumericalError", "AbundanceGLMM",
    "DistanceSampling", "FitResult", "NMixture", "fit_glmm", "fit_hds", "fit_nmix",
    "SimTruth", "sim_dataset",
]
