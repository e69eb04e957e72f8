"""Learned safeguarded line-search solver for CS-MRI with bilevel meta-training."""

from .autodiff import NumericFailure, complex_conv2d, hvp, record_and_grad
from .meta import Checkpoint, TrainConfig, adapt_omega, stair_train, train
from .metrics import nmse, psnr, ssim
from .mri import SamplingMask, TaskDataset, dft2, gen_mask, gen_phantom, idft2, make_task
from .regularizer import FeatureNetParams
from .solver import SolverConfig, solve, unrolled_forward

__all__ = [
    "Checkpoint", "FeatureNetParams", "NumericFailure", "SamplingMask", "SolverConfig",
    "TaskDataset", "TrainConfig", "adapt_omega", "complex_conv2d", "dft2", "gen_mask",
    "gen_phantom", "hvp", "idft2", "make_task", "nmse", "psnr", "record_and_grad", "solve",
    "ssim", "stair_train", "train", "unrolled_forward",
]
