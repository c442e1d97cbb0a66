"""Monocular keyframe SLAM with epipolar-guided semi-dense mapping.

Subsystems: geometry (camera model, triangulation), features (multi-scale
binary features), worldmap (keyframes, points, covisibility), tracking,
mapping (keyframe insertion + local bundle adjustment), densify (correlation
matching along epipolar segments), relocate (binary-word place recognition,
P3P), evaluate (map-to-surface accuracy), synth (test scene generator).

Hot kernels are compiled (``semislam.kernels._native``) with a pure numpy
fallback; see ``semislam.kernels.BACKEND``.
"""

__version__ = "0.1.0"

from .config import Config, load_config
from .geometry import CameraModel, Pose

__all__ = ["CameraModel", "Pose", "Config", "load_config", "__version__"]
