"""Dense rigid-motion fields for stereo scene flow.

Reconstruct optical flow from disparity and per-pixel SE(3) motion, estimate
such motion fields, detect occlusions, fuse flow estimates, refine
disparities and evaluate the results against a synthetic oracle.
"""

__version__ = "0.1.0"

from .errors import RigidFlowError
from .field import Field
from .geometry import CameraRig, depth_to_disparity, disparity_to_depth, project, unproject
from .se3 import RigidMotion

__all__ = [
    "CameraRig",
    "Field",
    "RigidFlowError",
    "RigidMotion",
    "depth_to_disparity",
    "disparity_to_depth",
    "project",
    "unproject",
]
