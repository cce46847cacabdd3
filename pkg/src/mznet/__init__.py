"""Demoireing network with multi-dilation and large-kernel attention blocks,
built on a self-contained NCHW tensor engine with reverse-mode gradients."""

from .engine import ConvSpec, Tape, Tensor, backward
from .model import CostReport, ModelConfig, build_model, count_macs, count_params, forward, infer_padded, select_kernel_size
from .synth import ImagePair, SynthRanges, SynthSpec, estimate_translation, generate_pair, inject_misalignment, make_dataset
from .training import OptimState, TrainConfig, adam_step, cosine_lr, loss_total, perceptual_proxy, train
from .metrics import MetricsReport, psnr, ssim

__all__ = [
    "ConvSpec", "Tape", "Tensor", "backward",
    "CostReport", "ModelConfig", "build_model", "count_macs", "count_params",
    "forward", "infer_padded", "select_kernel_size",
    "ImagePair", "SynthRanges", "SynthSpec", "estimate_translation",
    "generate_pair", "inject_misalignment", "make_dataset",
    "OptimState", "TrainConfig", "adam_step", "cosine_lr", "loss_total",
    "perceptual_proxy", "train",
    "MetricsReport", "psnr", "ssim",
]

__version__ = "0.1.0"
