from .base import AbundanceEstimator, FitResult, Prediction, fit_model, predict_abundance
from .glmm import AbundanceGLMM, fit_glmm, glmm_predict
from .hds import DistanceSampling, fit_hds, hds_predict, hds_site_loglik
from .nmix import NMixture, fit_nmix, nmix_predict, nmix_site_loglik

__all__ = ["AbundanceEstimator", "FitResult", "Prediction", "fit_model", "predict_abundance",
           "AbundanceGLMM", "fit_glmm", "glmm_predict", "DistanceSampling", "fit_hds",
           "hds_predict", "hds_site_loglik", "NMixture", "fit_nmix", "nmix_predict",
           "nmix_site_loglik"]
