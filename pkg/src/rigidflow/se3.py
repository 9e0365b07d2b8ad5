"""SE(3) rigid motions and their twist coordinates.

A twist is a 6-vector ``(v, w)``: translational part first, rotational part
(axis-angle, radians) second. The same layout is used for twist fields,
smoothness terms and fitter Jacobians.

The ``*_batch`` functions work on stacked arrays (``(..., 6)`` twists,
``(..., 3, 3)`` rotations); :class:`RigidMotion` wraps a single element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BranchError

SMALL_ANGLE = 1e-8
BRANCH_MARGIN = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices ``(..., 3, 3)`` with ``hat(w) @ p == cross(w, p)``."""
    w = np.asarray(w, dtype=np.float64)
    z = np.zeros(w.shape[:-1])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
            np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
            np.stack([-w[..., 1], w[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def _exp_coefficients(theta: np.ndarray):
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    th2 = th * th
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    half = 0.5 * th
    b = np.where(small, 0.5 - theta**2 / 24.0, 0.5 * (np.sin(half) / half) ** 2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - np.sin(th)) / (th2 * th))
    return a, b, c


def exp_batch(xi) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map. Returns ``(R (..., 3, 3), t (..., 3))``."""
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _exp_coefficients(theta)
    W = hat(w)
    W2 = W @ W
    eye = np.eye(3)
    R = eye + a[..., None, None] * W + b[..., None, None] * W2
    V = eye + b[..., None, None] * W + c[..., None, None] * W2
    t = np.einsum("...ij,...j->...i", V, v)
    return R, t


def log_batch(R, t) -> np.ndarray:
    """Logarithm on the principal branch. Returns twists ``(..., 6)``.

    Raises:
        BranchError: if any rotation angle is within ``BRANCH_MARGIN`` of pi.
    """
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    s = 0.5 * np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    cos = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    sin = np.linalg.norm(s, axis=-1)
    theta = np.arctan2(sin, cos)
    if np.any(theta >= np.pi - BRANCH_MARGIN):
        raise BranchError("rotation angle too close to pi for the principal logarithm")
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    scale = np.where(small, 1.0 + theta**2 / 6.0, th / np.where(small, 1.0, sin))
    w = scale[..., None] * s
    a, b, _ = _exp_coefficients(theta)
    d = np.where(small, 1.0 / 12.0 + theta**2 / 720.0, (1.0 - a / (2.0 * b)) / (th * th))
    W = hat(w)
    V_inv = np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)
    v = np.einsum("...ij,...j->...i", V_inv, t)
    return np.concatenate([v, w], axis=-1)


def apply_batch(R, t, P) -> np.ndarray:
    return np.einsum("...ij,...j->...i", R, P) + t


def compose_batch(Ra, ta, Rb, tb) -> tuple[np.ndarray, np.ndarray]:
    """``A o B``: apply B first, then A."""
    return Ra @ Rb, apply_batch(Ra, ta, tb)


def inverse_batch(R, t) -> tuple[np.ndarray, np.ndarray]:
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


@dataclass(frozen=True)
class RigidMotion:
    """A single SE(3) element acting as ``P -> R @ P + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def exp(cls, xi) -> "RigidMotion":
        R, t = exp_batch(np.asarray(xi, dtype=np.float64).reshape(6))
        return cls(R, t)

    def log(self) -> np.ndarray:
        return log_batch(self.R, self.t)

    def apply(self, P) -> np.ndarray:
        return apply_batch(self.R, self.t, np.asarray(P, dtype=np.float64))

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        return RigidMotion(*compose_batch(self.R, self.t, other.R, other.t))

    def __matmul__(self, other: "RigidMotion") -> "RigidMotion":
        return self.compose(other)

    def inverse(self) -> "RigidMotion":
        return RigidMotion(*inverse_batch(self.R, self.t))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
            and abs(np.linalg.det(self.R) - 1.0) <= tol
        )


def exp(xi) -> RigidMotion:
    return RigidMotion.exp(xi)


def log(T: RigidMotion) -> np.ndarray:
    return T.log()


def compose(A: RigidMotion, B: RigidMotion) -> RigidMotion:
    return A.compose(B)


def apply(T: RigidMotion, P) -> np.ndarray:
    return T.apply(P)


def inverse(T: RigidMotion) -> RigidMotion:
    return T.inverse()
