"""Flow fusion by reliability and closed-form disparity refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import check_channels, check_same_shape
from .geometry import CameraRig, pixel_grid
from .motion_field import valid_disparity
from .occlusion import bilinear_warp
from .parallel import concat_rows, map_rows
from .se3 import exp_batch

AVERAGE, FROM_S1, FROM_S2, S2_FALLBACK = 0, 1, 2, 3
MIN_SINGULAR = 1e-12


def fuse_flows(flow_s1, occ_s1, flow_s2, occ_disp) -> tuple[np.ndarray, np.ndarray]:
    """Combine photometric (stage-1) and reconstructed (stage-2) flow.

    The stage-1 flow is reliable off ``occ_s1``; the stage-2 flow, being
    rebuilt from disparity, is reliable off ``occ_disp``. Where both are
    reliable they are averaged, where one is reliable it is copied, and
    otherwise the stage-2 flow is kept.

    Returns:
        ``(flow, provenance)``; provenance codes are 0 average, 1 stage-1,
        2 stage-2, 3 stage-2 fallback (neither reliable).
    """
    flow_s1 = check_channels(flow_s1, 2, "flow_s1")
    flow_s2 = check_channels(flow_s2, 2, "flow_s2")
    occ_s1 = check_channels(occ_s1, 1, "occ_s1").astype(bool)
    occ_disp = check_channels(occ_disp, 1, "occ_disp").astype(bool)
    check_same_shape(flow_s1, occ_s1, flow_s2, occ_disp, names=("flow_s1", "occ_s1", "flow_s2", "occ_disp"))
    ok1, ok2 = ~occ_s1, ~occ_disp
    prov = np.select(
        [ok1 & ok2, ok1, ok2], [AVERAGE, FROM_S1, FROM_S2], default=S2_FALLBACK
    ).astype(np.int64)
    mean = 0.5 * (flow_s1 + flow_s2)
    out = np.where((prov == AVERAGE)[..., None], mean, np.where((prov == FROM_S1)[..., None], flow_s1, flow_s2))
    return out, prov


def condition_guard(B, threshold: float = 1e4) -> np.ndarray | bool:
    """True where the 3 x 2 system ``B`` is too close to rank one to solve.

    Rejects when the singular-value ratio exceeds ``threshold`` or the
    smaller singular value is below 1e-12. Broadcasts over leading axes.
    """
    B = np.asarray(B, dtype=np.float64)
    s = np.linalg.svd(B, compute_uv=False)
    smax, smin = s[..., 0], s[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        bad = ~np.isfinite(s).all(axis=-1) | (smin < MIN_SINGULAR) | (smax / smin > threshold)
    return bool(bad) if bad.ndim == 0 else bad


def second_disparity_estimate(disp2, flow, occ_flow=None) -> np.ndarray:
    """Second-frame disparity brought to first-frame pixels by warping with ``flow``.

    Pixels whose lookup leaves the frame, hits an invalid disparity, or is
    flow-occluded are set to 0 (invalid).
    """
    disp2 = check_channels(disp2, 1, "disp2")
    d = np.where(valid_disparity(disp2), disp2, np.nan)
    warped, inside = bilinear_warp(d, flow)
    ok = inside & np.isfinite(warped)
    if occ_flow is not None:
        ok &= ~check_channels(occ_flow, 1, "occ_flow").astype(bool)
    return np.where(ok, np.nan_to_num(warped), 0.0)


def refine_system(d1_hat, d2_hat, flow, motion, rig: CameraRig, xs=None, ys=None):
    """Per-pixel linearised system ``B @ (delta1, delta2) = gamma``.

    Both sides are divided by ``fx * b`` so the ray vectors enter
    unscaled: ``beta_i = a_i / D_i**2`` and
    ``gamma = t / (fx b) + a_1 / D_1 + a_2 / D_2`` with ``a_1 = -R K^-1 p_1``
    and ``a_2 = K^-1 p_2``. Returns ``(B (..., 3, 2), gamma (..., 3))``.
    """
    d1_hat = np.asarray(d1_hat, dtype=np.float64)
    d2_hat = np.asarray(d2_hat, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if xs is None:
        xs, ys = pixel_grid(*d1_hat.shape)
    R, t = exp_batch(motion)
    ones = np.ones_like(xs)
    p1 = np.stack([xs, ys, ones], axis=-1)
    p2 = np.stack([xs + flow[..., 0], ys + flow[..., 1], ones], axis=-1)
    Kinv = rig.K_inv
    a1 = -np.einsum("...ij,jk,...k->...i", R, Kinv, p1)
    a2 = p2 @ Kinv.T
    with np.errstate(divide="ignore", invalid="ignore"):
        B = np.stack([a1 / (d1_hat**2)[..., None], a2 / (d2_hat**2)[..., None]], axis=-1)
        gamma = t / rig.fxb + a1 / d1_hat[..., None] + a2 / d2_hat[..., None]
    return B, gamma


def solve_normal(B, gamma) -> np.ndarray:
    """Closed-form least squares ``(B^T B)^-1 B^T gamma`` for stacked 3 x 2 systems."""
    BtB = np.einsum("...ki,...kj->...ij", B, B)
    Btg = np.einsum("...ki,...k->...i", B, gamma)
    a, b, d = BtB[..., 0, 0], BtB[..., 0, 1], BtB[..., 1, 1]
    det = a * d - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        x1 = (d * Btg[..., 0] - b * Btg[..., 1]) / det
        x2 = (a * Btg[..., 1] - b * Btg[..., 0]) / det
    return np.stack([x1, x2], axis=-1)


@dataclass(frozen=True)
class RefineResult:
    delta1: np.ndarray
    delta2: np.ndarray
    applied: np.ndarray

    def refined(self, d1_hat, d2_hat) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(d1_hat) + self.delta1, np.asarray(d2_hat) + self.delta2


def refine_disparity(
    d1_hat,
    d2_hat,
    flow_fused,
    motion,
    rig: CameraRig,
    cond_threshold: float = 1e4,
    max_delta: float = 3.0,
    threads: int | None = None,
) -> RefineResult:
    """Correct first- and second-frame disparities so they agree with the motion.

    For each pixel, the first-frame point (from ``d1_hat``) moved by the
    pixel's rigid motion must coincide with the second-frame point at the
    flow correspondence (from ``d2_hat``, already warped to the first
    frame). The constraint is linearised around the current disparities
    and solved in closed form. Deltas are clamped to ``max_delta`` px.

    Pixels are left unchanged (``applied`` False, deltas 0) where inputs are
    invalid, the system is ill-conditioned, or a refined disparity would
    reach zero or change sign.
    """
    d1_hat = check_channels(d1_hat, 1, "d1_hat")
    d2_hat = check_channels(d2_hat, 1, "d2_hat")
    flow_fused = check_channels(flow_fused, 2, "flow_fused")
    motion = check_channels(motion, 6, "motion")
    check_same_shape(d1_hat, d2_hat, flow_fused, motion, names=("d1_hat", "d2_hat", "flow_fused", "motion"))
    H, W = d1_hat.shape

    def block(r0, r1):
        xs, ys = pixel_grid(H, W)
        d1, d2 = d1_hat[r0:r1], d2_hat[r0:r1]
        ok = valid_disparity(d1) & valid_disparity(d2) & np.all(np.isfinite(flow_fused[r0:r1]), axis=-1)
        s1 = np.where(ok, d1, -1.0)
        s2 = np.where(ok, d2, -1.0)
        B, gamma = refine_system(s1, s2, flow_fused[r0:r1], motion[r0:r1], rig, xs[r0:r1], ys[r0:r1])
        ok &= ~condition_guard(B, cond_threshold)
        delta = np.clip(np.nan_to_num(solve_normal(B, gamma)), -max_delta, max_delta)
        ok &= (s1 + delta[..., 0] < 0) & (s2 + delta[..., 1] < 0)
        delta = np.where(ok[..., None], delta, 0.0)
        return delta[..., 0], delta[..., 1], ok

    d1, d2, ok = concat_rows(map_rows(block, H, threads))
    return RefineResult(d1, d2, ok)
