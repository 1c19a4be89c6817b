"""Conditional spatio-temporal normalizing flows for grid-sequence forecasting."""

from ._kernels import BACKEND as kernel_backend
from .model import ModelConfig, STFlow, bits_per_dim
from .config import RunConfig, parse_config, serialize_config

__version__ = "0.1.0"
__all__ = ["kernel_backend", "ModelConfig", "STFlow", "bits_per_dim",
           "RunConfig", "parse_config", "serialize_config", "__version__"]
