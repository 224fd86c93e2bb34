"""latentflow: variable-length latent sequence generation.

Flow-matching transformer training, one-step distillation warmup,
adversarial post-training, and few-step ping-pong sampling over synthetic
latent sequences, in numpy with numba-accelerated kernels.
"""

from .core import (
    GenerationLength,
    LatentSequence,
    PaddedBatch,
    allocate_generation_length,
    build_batch,
    read_dataset,
    silence_augment,
    trim,
    write_dataset,
)
from .dit import ConditioningBundle, InpaintSpec, ModelConfig, dit_backward, dit_forward, init_params
from .schedules import (
    ScheduleSpec,
    inference_schedule,
    logsnr,
    mu_for_length,
    sample_timestep_disc,
    sample_timestep_train,
    shift_timestep,
    t_from_logsnr,
)
from .synth import OracleEmbedder

__version__ = "0.1.0"

__all__ = [
    "GenerationLength",
    "LatentSequence",
    "PaddedBatch",
    "allocate_generation_length",
    "build_batch",
    "read_dataset",
    "silence_augment",
    "trim",
    "write_dataset",
    "ConditioningBundle",
    "InpaintSpec",
    "ModelConfig",
    "dit_backward",
    "dit_forward",
    "init_params",
    "ScheduleSpec",
    "inference_schedule",
    "logsnr",
    "mu_for_length",
    "sample_timestep_disc",
    "sample_timestep_train",
    "shift_timestep",
    "t_from_logsnr",
    "OracleEmbedder",
    "__version__",
]
