"""Pose-free sparse-view reconstruction on a numpy autodiff core."""
from .camera import Intrinsics, Pose
from .model import ModelConfig, ReconstructionModel, preset
from .triplane import Triplane

__all__ = ["Intrinsics", "Pose", "ModelConfig", "ReconstructionModel", "Triplane", "preset"]
__version__ = "0.1.0"
