"""ClusVPR: clustering-weighted transformer refinement, grouped VLAD aggregation
and pyramid self-supervised training for visual place recognition."""

from .config import ConfigError, ModelConfig, RunConfig, TrainConfig, WorldSpec, load_config
from .model import ClusVPR, encode_images

__all__ = [
    "ClusVPR",
    "ConfigError",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "WorldSpec",
    "encode_images",
    "load_config",
]
__version__ = "0.1.0"
