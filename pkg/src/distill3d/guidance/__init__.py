"""Diffusion-prior guidance: schedules, backends, adapters and distillation gradients."""

from .backends import (
    GuidanceBackend,
    OracleBackend,
    ToyConvBackend,
    make_backend,
    register_backend,
    registered_backends,
    resize_image,
)
from .distill import (
    distill_loss,
    lora_loss,
    lora_preview,
    q_sample,
    sds3d_gradient,
    sds_gradient,
    vsd_gradient,
)
from .lora import LoraModule
from .schedule import DiffusionSchedule, NoiseBand, NoiseBands, sample_noise_level, timestep_weight

__all__ = [
    "DiffusionSchedule",
    "GuidanceBackend",
    "LoraModule",
    "NoiseBand",
    "NoiseBands",
    "OracleBackend",
    "ToyConvBackend",
    "distill_loss",
    "lora_loss",
    "lora_preview",
    "make_backend",
    "q_sample",
    "register_backend",
    "registered_backends",
    "resize_image",
    "sample_noise_level",
    "sds3d_gradient",
    "sds_gradient",
    "timestep_weight",
    "vsd_gradient",
]
