"""Bilinear warping, forward-backward occlusion masks and mask algebra.

Masks are boolean (H, W) arrays; occlusion masks use True for occluded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .field import check_channels, check_same_shape
from .geometry import pixel_grid
from .parallel import concat_rows, map_rows


@dataclass(frozen=True)
class OcclusionParams:
    """Thresholds of the forward-backward check.

    ``alpha1`` is relative (dimensionless), ``alpha2`` absolute in px^2.
    By default a pixel is occluded when the round-trip consistency test
    fails; ``flag_consistent=True`` flips the mask to flag pixels that pass
    it instead (out-of-frame lookups stay occluded either way).
    """

    alpha1: float = 0.01
    alpha2: float = 0.5
    flag_consistent: bool = False

    def __post_init__(self):
        if not (self.alpha1 >= 0 and self.alpha2 >= 0):
            raise ParameterError("occlusion thresholds must be non-negative")


def _sample(src: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear lookup of ``src`` (H, W, C) at float coordinates ``xs, ys``.

    Corners with zero weight are ignored, so sampling exactly on a pixel
    center next to a NaN neighbour stays finite.
    """
    H, W = src.shape[:2]
    inb = (xs >= 0) & (xs <= W - 1) & (ys >= 0) & (ys <= H - 1)
    xc = np.where(inb, xs, 0.0)
    yc = np.where(inb, ys, 0.0)
    x0 = np.clip(np.floor(xc), 0, max(W - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(yc), 0, max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (xc - x0)[..., None]
    ay = (yc - y0)[..., None]
    out = np.zeros(xs.shape + (src.shape[2],))
    for yi, xi, w in (
        (y0, x0, (1 - ax) * (1 - ay)),
        (y0, x1, ax * (1 - ay)),
        (y1, x0, (1 - ax) * ay),
        (y1, x1, ax * ay),
    ):
        out += np.where(w > 0, w * src[yi, xi], 0.0)
    out[~inb] = np.nan
    return out, inb


def bilinear_warp(src, flow, threads: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``src`` at ``x + flow(x)`` for every pixel ``x``.

    Args:
        src: (H, W) or (H, W, C) array.
        flow: (H, W, 2) displacement in pixels.

    Returns:
        ``(warped, inside)``: warped values with the same shape as ``src``
        (NaN outside the frame) and a boolean mask that is False where the
        sample point leaves ``[0, W-1] x [0, H-1]``.
    """
    src = np.asarray(src, dtype=np.float64)
    flow = check_channels(flow, 2, "flow")
    check_same_shape(src, flow, names=("src", "flow"))
    squeeze = src.ndim == 2
    src3 = src[..., None] if squeeze else src
    H, W = flow.shape[:2]

    def block(r0, r1):
        xs, ys = pixel_grid(H, W)
        return _sample(src3, xs[r0:r1] + flow[r0:r1, :, 0], ys[r0:r1] + flow[r0:r1, :, 1])

    out, inside = concat_rows(map_rows(block, H, threads))
    return (out[..., 0] if squeeze else out), inside


def fb_occlusion(
    flow_fwd, flow_bwd, params: OcclusionParams = OcclusionParams(), threads: int | None = None
) -> np.ndarray:
    """Forward occlusion mask from a forward/backward flow (or disparity) pair.

    A pixel is occluded when the round trip ``F_f(x) + F_b(x + F_f(x))`` is
    large relative to the flow magnitudes, or when the backward lookup leaves
    the frame. Disparities can be passed as flows with a zero v channel.
    """
    flow_fwd = check_channels(flow_fwd, 2, "flow_fwd")
    flow_bwd = check_channels(flow_bwd, 2, "flow_bwd")
    check_same_shape(flow_fwd, flow_bwd, names=("flow_fwd", "flow_bwd"))
    back, inside = bilinear_warp(flow_bwd, flow_fwd, threads)
    back = np.where(inside[..., None], back, 0.0)
    lhs = np.sum((flow_fwd + back) ** 2, axis=-1)
    rhs = params.alpha1 * (np.sum(flow_fwd**2, axis=-1) + np.sum(back**2, axis=-1)) + params.alpha2
    violated = lhs >= rhs
    if params.flag_consistent:
        violated = ~violated
    return violated | ~inside


def disparity_as_flow(disp) -> np.ndarray:
    disp = check_channels(disp, 1, "disparity")
    return np.stack([disp, np.zeros_like(disp)], axis=-1)


def mask_union(masks) -> np.ndarray:
    """Pixelwise OR of a non-empty sequence of boolean masks."""
    masks = list(masks)
    if not masks:
        raise ParameterError("mask_union needs at least one mask")
    check_same_shape(*masks)
    out = np.zeros(np.shape(masks[0])[:2], dtype=bool)
    for m in masks:
        m = np.asarray(m)
        if m.ndim == 3:
            if m.shape[2] != 1:
                raise DimensionError("masks must be single channel")
            m = m[..., 0]
        out |= m.astype(bool)
    return out


def reliability(flow_occ, disp_occ) -> tuple[np.ndarray, np.ndarray]:
    """Reliable pixels of the photometric flow and of the reconstructed flow.

    The photometric flow is trusted off its own occlusions; the flow
    reconstructed from disparity is trusted off the disparity occlusions.
    """
    check_same_shape(flow_occ, disp_occ, names=("flow_occ", "disp_occ"))
    return ~mask_union([flow_occ]), ~mask_union([disp_occ])


def pseudo_label_reliable(flow_occ, disp1_occ, disp2_occ, flow, threads: int | None = None) -> np.ndarray:
    """Pixels where a scene-flow pseudo-label can be trusted.

    Unreliable is the union of the flow occlusions, the first-pair disparity
    occlusions and the second-pair disparity occlusions warped into the
    first frame (with out-of-frame lookups counted as occluded).
    """
    warped, inside = bilinear_warp(np.asarray(disp2_occ, dtype=np.float64), flow, threads)
    warped_occ = ~inside | (np.nan_to_num(warped, nan=1.0) > 0)
    return ~mask_union([flow_occ, disp1_occ, warped_occ])
