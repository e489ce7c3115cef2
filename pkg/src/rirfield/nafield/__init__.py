"""Geometry-conditioned neural acoustic field with LoRA adapters."""
from .checkpoint import load_checkpoint, save_adapter, save_checkpoint
from .model import (
    Dense,
    FieldConfig,
    FieldInput,
    LoraAdapter,
    LoraPair,
    ModelParams,
    decay_profile,
    encode_inputs,
    forward,
    gradients,
    init_params,
    lora_init,
    loss,
    merge_lora,
    predict,
    sinusoidal_encode,
    spectrogram_target,
    synthesize_waveform,
)

__all__ = [
    "Dense",
    "FieldConfig",
    "FieldInput",
    "LoraAdapter",
    "LoraPair",
    "ModelParams",
    "decay_profile",
    "encode_inputs",
    "forward",
    "gradients",
    "init_params",
    "load_checkpoint",
    "lora_init",
    "loss",
    "merge_lora",
    "predict",
    "save_adapter",
    "save_checkpoint",
    "sinusoidal_encode",
    "spectrogram_target",
    "synthesize_waveform",
]
