"""Dense rigid-motion fields: flow reconstruction, disparity change, smoothness, PCA view.

Motion fields are (H, W, 6) twist arrays (translation first); the exponential
is taken per pixel when the field is used.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import check_channels, check_same_shape
from .geometry import CameraRig, pixel_grid, project_unchecked, unproject_unchecked
from .occlusion import bilinear_warp
from .parallel import concat_rows, map_rows
from .se3 import apply_batch, exp_batch


@dataclass(frozen=True)
class ReconstructionOutput:
    """Flow (H, W, 2), second-frame depth (H, W) and validity (H, W) bool.

    Invalid pixels hold 0 in ``flow`` and ``new_depth``.
    """

    flow: np.ndarray
    new_depth: np.ndarray
    valid: np.ndarray


def valid_disparity(disp) -> np.ndarray:
    disp = np.asarray(disp, dtype=np.float64)
    return np.isfinite(disp) & (disp < 0)


def reconstruct_flow(
    disparity, motion, rig: CameraRig, valid=None, threads: int | None = None
) -> ReconstructionOutput:
    """Optical flow induced by moving each first-frame point by its own rigid motion.

    Each pixel is lifted to 3D with the depth implied by its disparity,
    moved by ``exp(motion[y, x])`` and projected back; the flow is the pixel
    displacement. Pixels with zero or invalid disparity, or whose moved point
    ends up behind the camera, are marked invalid.

    Args:
        disparity: (H, W) negative disparity in pixels.
        motion: (H, W, 6) twist field.
        rig: camera rig.
        valid: optional extra (H, W) validity mask for the disparity.
    """
    disparity = check_channels(disparity, 1, "disparity")
    motion = check_channels(motion, 6, "motion")
    names = ("disparity", "motion")
    if valid is None:
        check_same_shape(disparity, motion, names=names)
        ok = valid_disparity(disparity)
    else:
        check_same_shape(disparity, motion, valid, names=names + ("valid",))
        ok = valid_disparity(disparity) & np.asarray(valid, dtype=bool)
    H, W = disparity.shape

    def block(r0, r1):
        xs, ys = pixel_grid(H, W)
        xs, ys = xs[r0:r1], ys[r0:r1]
        good = ok[r0:r1]
        z = np.where(good, rig.fxb / np.where(good, np.abs(disparity[r0:r1]), 1.0), 1.0)
        P = unproject_unchecked(xs, ys, z, rig)
        R, t = exp_batch(motion[r0:r1])
        uv, z2 = project_unchecked(apply_batch(R, t, P), rig)
        good = good & (z2 > 0)
        flow = np.stack([uv[..., 0] - xs, uv[..., 1] - ys], axis=-1)
        flow = np.where(good[..., None], flow, 0.0)
        return flow, np.where(good, z2, 0.0), good

    flow, z2, good = concat_rows(map_rows(block, H, threads))
    return ReconstructionOutput(flow, z2, good)


def disparity_change(disp1, disp2, flow, threads: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Disparity change pseudo-label ``disp2(x + flow(x)) - disp1(x)``.

    ``disp2`` lives on the second frame's pixel grid and is sampled
    bilinearly. Returns ``(zeta, valid)``; ``zeta`` is 0 where invalid
    (lookup leaves the frame, or either disparity is missing).
    """
    disp1 = check_channels(disp1, 1, "disp1")
    disp2 = check_channels(disp2, 1, "disp2")
    flow = check_channels(flow, 2, "flow")
    check_same_shape(disp1, disp2, flow, names=("disp1", "disp2", "flow"))
    d2 = np.where(valid_disparity(disp2), disp2, np.nan)
    warped, inside = bilinear_warp(d2, flow, threads)
    valid = inside & np.isfinite(warped) & valid_disparity(disp1)
    zeta = np.where(valid, np.nan_to_num(warped) - np.where(valid, disp1, 0.0), 0.0)
    return zeta, valid


def smoothness_terms(motion, valid=None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-pair L1 twist differences.

    Returns ``(dx, mx, dy, my)``: horizontal differences (H, W-1) and their
    pair masks, then vertical differences (H-1, W) and masks.
    """
    motion = check_channels(motion, 6, "motion")
    if valid is None:
        valid = np.ones(motion.shape[:2], dtype=bool)
    else:
        check_same_shape(motion, valid, names=("motion", "valid"))
        valid = np.asarray(valid, dtype=bool)
    dx = np.abs(motion[:, 1:] - motion[:, :-1]).sum(axis=-1)
    dy = np.abs(motion[1:] - motion[:-1]).sum(axis=-1)
    mx = valid[:, 1:] & valid[:, :-1]
    my = valid[1:] & valid[:-1]
    return dx, mx, dy, my


def twist_smoothness(motion, valid=None) -> float:
    """Mean L1 difference between the twists of adjacent valid pixel pairs.

    Pairs are horizontal and vertical neighbours with both pixels valid.
    Returns 0 when there are no such pairs.
    """
    dx, mx, dy, my = smoothness_terms(motion, valid)
    count = int(mx.sum() + my.sum())
    if count == 0:
        return 0.0
    return float((dx[mx].sum() + dy[my].sum()) / count)


def pca_project(motion, valid=None, rank_tol: float = 1e-12):
    """Project twists onto the top-3 principal directions of their covariance.

    Returns ``(coords, eigvals, directions)`` where ``coords`` is (H, W, 3)
    with NaN in components whose eigenvalue is negligible (below
    ``rank_tol`` times the largest, or exactly zero), and ``directions`` is
    (6, 3). Each direction is signed so its largest-magnitude entry is
    positive.
    """
    motion = check_channels(motion, 6, "motion")
    H, W = motion.shape[:2]
    sel = np.ones((H, W), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    samples = motion[sel]
    if samples.shape[0] < 3:
        raise ValueError("PCA visualisation needs at least 3 samples")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / samples.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:3]
    evals, dirs = evals[order], evecs[:, order]
    idx = np.argmax(np.abs(dirs), axis=0)
    dirs = dirs * np.sign(dirs[idx, np.arange(3)])
    top = max(evals[0], 0.0)
    live = (evals > rank_tol * top) & (evals > 0)
    coords = (motion - mean) @ dirs
    coords[..., ~live] = np.nan
    coords[~sel] = np.nan
    return coords, evals, dirs


def pca_visualize(motion, mode: str = "joint", valid=None) -> np.ndarray:
    """Render a twist field as RGB in [0, 1] via a 3-component PCA.

    ``mode="per-channel"`` stretches each component to [0, 1] on its own;
    ``mode="joint"`` uses one common range for all components so relative
    spreads are preserved. Degenerate components and invalid pixels are
    mid-gray (0.5).
    """
    if mode not in ("joint", "per-channel"):
        raise ValueError(f"unknown PCA mode {mode!r}")
    coords, _, _ = pca_project(motion, valid)
    out = np.full(coords.shape, 0.5)
    finite = np.isfinite(coords)
    if not finite.any():
        return out
    if mode == "joint":
        lo, hi = coords[finite].min(), coords[finite].max()
        if hi > lo:
            out[finite] = (coords[finite] - lo) / (hi - lo)
    else:
        for c in range(3):
            f = finite[..., c]
            if not f.any():
                continue
            vals = coords[..., c][f]
            lo, hi = vals.min(), vals.max()
            if hi > lo:
                out[..., c][f] = (vals - lo) / (hi - lo)
    return out
