"""VARMAX blocks wired into a state-advancing network."""
from .net import SurrogateError, SurrogateNet, WiringError, rollout, surrogate_step, surrogate_step_batch
from .varmax import VarmaxFitError, VarmaxParams, count_params, fit_varmax, spectral_radius

__all__ = ["SurrogateError", "SurrogateNet", "VarmaxFitError", "VarmaxParams", "WiringError", "count_params",
           "fit_varmax", "rollout", "spectral_radius", "surrogate_step", "surrogate_step_batch"]
