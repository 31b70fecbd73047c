"""Modulated multichannel VQ autoencoder with a masked-token transformer prior."""

from .autoencoder import AutoencoderConfig, MoVQ, SpatialConditionalNorm, initial_feature, scn_modulate
from .config import TrainConfig
from .errors import (
    ConfigurationError,
    DatasetError,
    FormatError,
    ModeError,
    MovqError,
    NumericError,
    ValidationError,
)
from .metrics import MetricsReport, diversity, psnr, ssim
from .prior import (
    MaskState,
    PriorConfig,
    SampleSchedule,
    TokenTransformer,
    autoregressive_sample,
    cosine_schedule,
    iterative_sample,
    masked_nll,
    masked_reconstruct,
    sample_training_mask,
)
from .vq import (
    Codebook,
    QuantizeResult,
    TokenGrid,
    compression_ratio,
    deserialize_tokens,
    quantize,
    serialize_tokens,
    straight_through,
    usage_stats,
)

__version__ = "0.1.0"

__all__ = [
    "AutoencoderConfig",
    "MoVQ",
    "SpatialConditionalNorm",
    "initial_feature",
    "scn_modulate",
    "TrainConfig",
    "ConfigurationError",
    "DatasetError",
    "FormatError",
    "ModeError",
    "MovqError",
    "NumericError",
    "ValidationError",
    "MetricsReport",
    "diversity",
    "psnr",
    "ssim",
    "MaskState",
    "PriorConfig",
    "SampleSchedule",
    "TokenTransformer",
    "autoregressive_sample",
    "cosine_schedule",
    "iterative_sample",
    "masked_nll",
    "masked_reconstruct",
    "sample_training_mask",
    "Codebook",
    "QuantizeResult",
    "TokenGrid",
    "compression_ratio",
    "deserialize_tokens",
    "quantize",
    "serialize_tokens",
    "straight_through",
    "usage_stats",
]
