"""Multi-stage diffusion with progressive signal transformations.

The diffusion mean is pushed through a chain of transformations
(downsampling, blurring, or a fitted linear autoencoder) as time runs
0 -> 1, with noise rescaled whenever the signal dimension shrinks.
Generation runs the chain in reverse with a unified DDPM/DDIM stepper
and multi-scale noise resampling at stage boundaries.
"""

from .schedules import (
    NoiseSchedule,
    PatchSpec,
    RescaleMode,
    StageKind,
    StageSchedule,
    build_noise_schedule,
    build_stage_schedule,
    eval_alpha_sigma,
    patch_snr,
    stage_of,
    transition_coeffs,
)
from .transforms import (
    TransformKind,
    TransformStack,
    blur_sigma,
    estimate_gamma,
    forward_to_stage,
    g_map,
    gaussian_blur_freq,
    interpolated_target,
)
from .diffusion import (
    BoundaryMode,
    FullNoise,
    LatentState,
    boundary_forward,
    boundary_reverse,
    q_sample,
    q_transition,
    reverse_posterior,
    sample_full_noise,
)
from .denoiser import Denoiser, DenoiserOutput, predict, x_from_eps
from .trainer import TrainState, ema_update, grad_loss, p2_weight, train_step, training_loss
from .sampler import CondSpec, SamplerConfig, conditional_generate, conditional_init, generate

__all__ = [
    "BoundaryMode",
    "CondSpec",
    "Denoiser",
    "DenoiserOutput",
    "FullNoise",
    "LatentState",
    "NoiseSchedule",
    "PatchSpec",
    "RescaleMode",
    "SamplerConfig",
    "StageKind",
    "StageSchedule",
    "TrainState",
    "TransformKind",
    "TransformStack",
    "blur_sigma",
    "boundary_forward",
    "boundary_reverse",
    "build_noise_schedule",
    "build_stage_schedule",
    "conditional_generate",
    "conditional_init",
    "ema_update",
    "estimate_gamma",
    "eval_alpha_sigma",
    "forward_to_stage",
    "g_map",
    "gaussian_blur_freq",
    "generate",
    "grad_loss",
    "interpolated_target",
    "p2_weight",
    "patch_snr",
    "predict",
    "q_sample",
    "q_transition",
    "reverse_posterior",
    "sample_full_noise",
    "stage_of",
    "train_step",
    "training_loss",
    "transition_coeffs",
    "x_from_eps",
]
