"""Space-time serialization, Gaussian splat rendering and particle dynamics plumbing."""

from .dynamics import DynamicsConfig, forward, rollout
from .features import ParticleFrame, to_gaussians
from .geometry import Camera
from .loss import LossConfig, frame_loss, trajectory_loss
from .render import GaussianScene, rasterize, rasterize_backward, rasterize_reference
from .sfc import GridSpec, get_pattern, sfc_encode
from .tspc import CodeLayout, merge_cloud, patch_group, serialize_cloud

__all__ = [
    "Camera", "CodeLayout", "DynamicsConfig", "GaussianScene", "GridSpec", "LossConfig", "ParticleFrame",
    "forward", "frame_loss", "get_pattern", "merge_cloud", "patch_group", "rasterize", "rasterize_backward",
    "rasterize_reference", "rollout", "serialize_cloud", "sfc_encode", "to_gaussians", "trajectory_loss",
]
__version__ = "0.1.0"
