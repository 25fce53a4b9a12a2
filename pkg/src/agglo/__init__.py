"""Linear-time agglomerative attention beside full dot-product attention.

The package bundles a small reverse-mode autodiff engine, both attention
layers, a weight-shared decoder for character language modelling, Adadelta
training, and a single-core scaling benchmark.
"""
from .attention import (
    AggloAttentionParams,
    FullAttentionParams,
    agglo_full,
    agglo_masked,
    full_attention,
)
from .errors import (
    AggloError,
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    TrainingError,
)
from .kernels import get_backend, set_backend, use_backend
from .model import DecoderModel, ModelConfig, count_params, decoder_forward, generate, lm_loss
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AggloAttentionParams",
    "AggloError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DecoderModel",
    "DimensionError",
    "FullAttentionParams",
    "GradTape",
    "ModelConfig",
    "Tensor",
    "TrainingError",
    "agglo_full",
    "agglo_masked",
    "backward",
    "count_params",
    "decoder_forward",
    "full_attention",
    "generate",
    "get_backend",
    "lm_loss",
    "set_backend",
    "use_backend",
]
