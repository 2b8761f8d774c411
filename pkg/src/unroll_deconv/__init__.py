"""Blind deconvolution by blind Richardson-Lucy and its unrolled, trainable counterpart."""

from .deep_url import TrainConfig, deblur_with_weights, train
from .grid import BoundaryMode, NoiseSpec, conv_same, corr_same
from .metrics import isnr, kernel_rmse, psnr, ssim
from .rl import rl_blind

__all__ = [
    "BoundaryMode",
    "NoiseSpec",
    "TrainConfig",
    "conv_same",
    "corr_same",
    "deblur_with_weights",
    "isnr",
    "kernel_rmse",
    "psnr",
    "rl_blind",
    "ssim",
    "train",
]

__version__ = "0.1.0"
