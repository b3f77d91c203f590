"""Deformable 3D Gaussian reconstruction with cross-time attention.

CPU-only, desk-scale, and differentiable end to end through a small
reverse-mode tape, so every gradient in the system can be checked against
central finite differences.
"""

from dgsplat.autodiff import DTensor, Tape, fd_check, set_default_dtype
from dgsplat.camera import Camera, look_at
from dgsplat.deform import DeformationField, FrequencyEncoder, encode
from dgsplat.encoder import CrossTimeEncoder, EncoderConfig, coupled_deform
from dgsplat.gaussians import DeformationResidual, GaussianSet, apply_residual
from dgsplat.metrics import MetricReport, per_frame_curve, psnr, ssim
from dgsplat.render import RenderSettings, RenderedImage, render, render_motion
from dgsplat.synth import FrameSet, GroundTruth, SceneSpec, generate, standard_scene
from dgsplat.train import (
    TimeBatch,
    TrainConfig,
    TrainState,
    ablate,
    evaluate,
    inference_render,
    init_state,
    sample_batch,
    train,
    train_step,
)

__all__ = [
    "Camera",
    "CrossTimeEncoder",
    "DTensor",
    "DeformationField",
    "DeformationResidual",
    "EncoderConfig",
    "FrameSet",
    "FrequencyEncoder",
    "GaussianSet",
    "GroundTruth",
    "MetricReport",
    "RenderSettings",
    "RenderedImage",
    "SceneSpec",
    "Tape",
    "TimeBatch",
    "TrainConfig",
    "TrainState",
    "ablate",
    "apply_residual",
    "coupled_deform",
    "encode",
    "evaluate",
    "fd_check",
    "generate",
    "inference_render",
    "init_state",
    "look_at",
    "per_frame_curve",
    "psnr",
    "render",
    "render_motion",
    "sample_batch",
    "set_default_dtype",
    "ssim",
    "standard_scene",
    "train",
    "train_step",
]

__version__ = "0.1.0"
