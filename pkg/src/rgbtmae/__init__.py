"""Siamese masked autoencoder for paired RGB/thermal images with CMSS-guided masking."""

from .cmss import CmssMap, cmss_from_arrays, cmss_map, raw_cmss
from .gmm import GmmState, damped_update, e_step, init_gmm, m_step
from .kernels import BACKEND
from .masking import MaskBudget, MaskPlan, SamplerConfig, schedule_at, select_visible
from .model import PRESETS, ModelConfig, SiameseMAE, build_model
from .patchgrid import DimensionError, RgbtPair

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CmssMap", "DimensionError", "GmmState", "MaskBudget", "MaskPlan",
    "ModelConfig", "PRESETS", "RgbtPair", "SamplerConfig", "SiameseMAE", "build_model",
    "cmss_from_arrays", "cmss_map", "damped_update", "e_step", "init_gmm", "m_step",
    "raw_cmss", "schedule_at", "select_visible",
]
