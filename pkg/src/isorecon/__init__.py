"""Isotropic reconstruction of anisotropic volumes with a 2D diffusion prior.

A noise predictor trained on lateral (XY) planes acts as the prior for axial
planes; each axial slice is generated with range-space data consistency and
initialised from the DDIM-encoded previous slice.
"""

from .degrade import (
    LinearDegradation,
    PSFKernel,
    make_average_operator,
    make_exact_operator,
    make_imputation_operator,
    make_interpolation_operator,
    make_operator,
    range_space_replace,
)
from .evaluate import EvalReport, ms_ssim, per_plane_eval, psnr, simulate_anisotropy
from .model import Denoiser, DenoiserCheckpoint, DenoiserConfig, TrainConfig, train_denoiser
from .sampler import StepPlan, ddim_encode, ddnm_decode, ensemble, reconstruct_volume
from .schedule import NoiseSchedule, forward_perturb, make_cosine_schedule
from .volume import Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "Denoiser", "DenoiserCheckpoint", "DenoiserConfig", "EvalReport", "LinearDegradation", "NoiseSchedule",
    "PSFKernel", "StepPlan", "TrainConfig", "Volume", "ddim_encode", "ddnm_decode", "ensemble",
    "forward_perturb", "make_average_operator", "make_cosine_schedule", "make_exact_operator",
    "make_imputation_operator", "make_interpolation_operator", "make_operator", "ms_ssim", "per_plane_eval",
    "psnr", "range_space_replace", "read_volume", "reconstruct_volume", "simulate_anisotropy",
    "train_denoiser", "write_volume",
]
