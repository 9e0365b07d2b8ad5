"""Pinhole stereo rig and conversions between disparity, depth, pixels and 3D.

Conventions: x right, y down, z forward, pixel (0, 0) is the center of the
top-left pixel. Left-to-right disparity is negative, so a point at depth ``Z``
has disparity ``-fx * b / Z``.

All functions broadcast over leading array dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidDepthError, ParameterError


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo pair sharing one intrinsics matrix.

    Attributes:
        fx, fy: focal lengths in pixels.
        cx, cy: principal point in pixels.
        baseline: distance between the left and right cameras in meters.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "baseline"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        if self.baseline <= 0:
            raise ParameterError("baseline must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def fxb(self) -> float:
        """``fx * baseline``: the depth-disparity product in px * m."""
        return self.fx * self.baseline

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "baseline": self.baseline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["baseline"])


def disparity_to_depth(d, rig: CameraRig):
    """Depth in meters from (negative) disparity in pixels.

    Raises:
        InvalidDepthError: if any disparity is zero.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d == 0):
        raise InvalidDepthError("zero disparity has no finite depth")
    return rig.fxb / np.abs(d)


def depth_to_disparity(z, rig: CameraRig):
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise InvalidDepthError("depth must be positive")
    return -rig.fxb / z


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Return float64 ``(xs, ys)`` pixel coordinate grids of shape (H, W)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def unproject_unchecked(x, y, depth, rig: CameraRig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    return np.stack(
        np.broadcast_arrays(z * (x - rig.cx) / rig.fx, z * (y - rig.cy) / rig.fy, z), axis=-1
    )


def unproject(p, depth, rig: CameraRig) -> np.ndarray:
    """Lift pixel(s) ``p = (..., 2)`` at ``depth`` to camera-frame points ``(..., 3)``.

    Raises:
        InvalidDepthError: if any depth is not positive.
    """
    p = np.asarray(p, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("unproject requires positive depth")
    return unproject_unchecked(p[..., 0], p[..., 1], depth, rig)


def project_unchecked(P, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    P = np.asarray(P, dtype=np.float64)
    z = P[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = rig.fx * P[..., 0] / z + rig.cx
        v = rig.fy * P[..., 1] / z + rig.cy
    return np.stack([u, v], axis=-1), z


def project(P, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame point(s) to ``(pixel (..., 2), depth (...))``.

    Raises:
        BehindCameraError: if any point has ``Z <= 0``.
    """
    P = np.asarray(P, dtype=np.float64)
    if np.any(~(P[..., 2] > 0)):
        raise BehindCameraError("point is not in front of the camera")
    return project_unchecked(P, rig)
