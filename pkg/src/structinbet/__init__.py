"""Structure-guided keyframe inbetweening with a small numpy diffusion model."""

from .attention import bidirectional_reference_attention, single_reference_attention
from .config import Config, TrainConfig, UNetConfig
from .data import sample_triplet
from .diffusion import make_schedule, sample_inbetween
from .guidance import build_mixed_trajectories, rasterize_skeleton, rasterize_trajectories
from .unet import InbetweenModel

__version__ = "0.1.0"

__all__ = [
    "Config",
    "InbetweenModel",
    "TrainConfig",
    "UNetConfig",
    "bidirectional_reference_attention",
    "build_mixed_trajectories",
    "make_schedule",
    "rasterize_skeleton",
    "rasterize_trajectories",
    "sample_inbetween",
    "sample_triplet",
    "single_reference_attention",
]
