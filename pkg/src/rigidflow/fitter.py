"""Classical estimation of dense rigid-motion fields from flow and depth.

The objective is a masked reprojection data term plus an L1 penalty on the
twist differences between neighbouring pixels. It is minimised by
alternating

* a data step: per-pixel damped Gauss-Newton on the pixel's twist, with the
  reprojection residuals of all reliable pixels in a square window, and
* a smoothing step: channel-wise weighted median of the twists in the same
  window, which is the proximal update of an L1 neighbour penalty.

Both steps are only kept at pixels where they do not raise the pixel's
windowed data residual, so the reported residual history never increases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, BranchError, EmptyFitError, ParameterError, UnderConstrainedError
from .field import check_channels, check_same_shape
from .geometry import CameraRig, pixel_grid, unproject_unchecked
from .parallel import concat_rows, map_rows
from .se3 import RigidMotion, apply_batch, compose_batch, exp_batch, log_batch

SMOOTH_SLACK = 1e-6
MIN_POINTS = 3  # 6 equations for 6 unknowns


@dataclass(frozen=True)
class FitterParams:
    lambda_smooth: float = 0.1
    outer_iters: int = 30
    gn_iters: int = 3
    damping: float = 1e-4
    window_radius: int = 2
    convergence_tol: float = 1e-4
    warm_start: bool = False

    def __post_init__(self):
        for name in ("lambda_smooth", "damping", "convergence_tol"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.outer_iters < 1 or self.gn_iters < 0 or self.window_radius < 1:
            raise ParameterError("need outer_iters >= 1, gn_iters >= 0, window_radius >= 1")


@dataclass
class FitReport:
    """Result of :func:`fit_rigid_field`.

    ``residual_history[0]`` is the residual of the initial field, then one
    entry per outer iteration (mean windowed RMS reprojection error, px).
    ``underconstrained`` flags pixels with fewer than 3 reliable points in
    their window.
    """

    motion: np.ndarray
    residual_history: list
    converged: bool
    underconstrained: np.ndarray


def jacobian_reprojection(xi, x, depth, rig: CameraRig) -> np.ndarray:
    """Derivative of the projected pixel w.r.t. a left perturbation of ``xi``.

    Differentiates ``delta -> project(exp(delta) @ exp(xi) @ unproject(x, depth))``
    at ``delta = 0``. Returns a 2 x 6 matrix (translation columns first).

    Raises:
        BehindCameraError: if the moved point is not in front of the camera.
    """
    xi = np.asarray(xi, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    P = unproject_unchecked(x[0], x[1], depth, rig)
    R, t = exp_batch(xi)
    Q = apply_batch(R, t, P)
    if not Q[2] > 0:
        raise BehindCameraError("transformed point is behind the camera")
    return _point_jacobian(Q[None], rig)[0]


def _point_jacobian(Q: np.ndarray, rig: CameraRig) -> np.ndarray:
    X, Y, Z = Q[..., 0], Q[..., 1], Q[..., 2]
    iz = 1.0 / Z
    xz, yz = X * iz, Y * iz
    fx, fy = rig.fx, rig.fy
    zero = np.zeros_like(Z)
    ju = np.stack([fx * iz, zero, -fx * xz * iz, -fx * xz * yz, fx * (1 + xz * xz), -fx * yz], axis=-1)
    jv = np.stack([zero, fy * iz, -fy * yz * iz, -fy * (1 + yz * yz), fy * xz * yz, fy * xz], axis=-1)
    return np.stack([ju, jv], axis=-2)


def _project(Q, rig):
    iz = 1.0 / Q[..., 2]
    return np.stack([rig.fx * Q[..., 0] * iz + rig.cx, rig.fy * Q[..., 1] * iz + rig.cy], axis=-1)


class _Problem:
    """Padded per-pixel data shared by the data and smoothing steps."""

    def __init__(self, target_flow, depth, reliable, rig, radius):
        H, W = depth.shape
        self.H, self.W, self.r, self.rig = H, W, radius, rig
        xs, ys = pixel_grid(H, W)
        z = np.where(reliable, depth, 1.0)
        P = unproject_unchecked(xs, ys, z, rig)
        tgt = np.stack([xs, ys], axis=-1) + np.where(reliable[..., None], target_flow, 0.0)
        pad = ((radius, radius), (radius, radius))
        self.P = np.pad(P, pad + ((0, 0),))
        self.tgt = np.pad(tgt, pad + ((0, 0),))
        self.rel = np.pad(reliable, pad)
        k = np.arange(-radius, radius + 1)
        self.offsets = [(dy, dx) for dy in k for dx in k]
        self.count = sum(self._shift(self.rel, 0, self.H, dy, dx).astype(np.int64) for dy, dx in self.offsets)

    def _shift(self, a, r0, r1, dy, dx):
        r = self.r
        return a[r0 + r + dy : r1 + r + dy, r + dx : r + dx + self.W]

    def energy(self, R, t, r0, r1, with_normal=False):
        """Windowed squared residual of each pixel in rows [r0, r1) under its own motion."""
        E = np.zeros(R.shape[:2])
        if with_normal:
            A = np.zeros(R.shape[:2] + (6, 6))
            g = np.zeros(R.shape[:2] + (6,))
        for dy, dx in self.offsets:
            rel = self._shift(self.rel, r0, r1, dy, dx)
            Q = apply_batch(R, t, self._shift(self.P, r0, r1, dy, dx))
            ahead = Q[..., 2] > 0
            Qs = np.where(ahead[..., None], Q, 1.0)
            res = _project(Qs, self.rig) - self._shift(self.tgt, r0, r1, dy, dx)
            res = np.where(rel[..., None], res, 0.0)
            E += np.sum(res * res, axis=-1)
            E = np.where(rel & ~ahead, np.inf, E)
            if with_normal:
                J = _point_jacobian(Qs, self.rig) * (rel & ahead)[..., None, None]
                A += np.einsum("...ki,...kj->...ij", J, J)
                g += np.einsum("...ki,...k->...i", J, res)
        if with_normal:
            return E, A, g
        return E


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Lower weighted median along the last axis (weights broadcast to values)."""
    order = np.argsort(values, axis=-1, kind="stable")
    v = np.take_along_axis(values, order, axis=-1)
    w = np.take_along_axis(np.broadcast_to(weights, values.shape), order, axis=-1)
    cw = np.cumsum(w, axis=-1)
    half = 0.5 * cw[..., -1:]
    idx = np.argmax(cw >= half, axis=-1)[..., None]
    return np.take_along_axis(v, idx, axis=-1)[..., 0]


def fit_rigid_field(
    target_flow,
    depth,
    reliable,
    rig: CameraRig,
    params: FitterParams = FitterParams(),
    init=None,
    threads: int | None = None,
) -> FitReport:
    """Estimate a per-pixel twist field that explains ``target_flow``.

    Args:
        target_flow: (H, W, 2) flow to explain, px.
        depth: (H, W) first-frame depth, m; must be positive on reliable pixels.
        reliable: (H, W) bool, pixels whose flow and depth enter the data term.
        rig: camera rig.
        params: solver settings.
        init: optional (H, W, 6) initial field (default identity, or the
            global rigid fit when ``params.warm_start``).
        threads: row-block worker count; results do not depend on it.

    Raises:
        EmptyFitError: if no pixel is reliable.
    """
    target_flow = check_channels(target_flow, 2, "target_flow")
    depth = check_channels(depth, 1, "depth")
    reliable = np.asarray(reliable, dtype=bool)
    check_same_shape(target_flow, depth, reliable, names=("target_flow", "depth", "reliable"))
    reliable = reliable & np.isfinite(depth) & (depth > 0) & np.all(np.isfinite(target_flow), axis=-1)
    if not reliable.any():
        raise EmptyFitError("no reliable pixels to fit")
    H, W = depth.shape
    prob = _Problem(target_flow, depth, reliable, rig, params.window_radius)
    supported = prob.count >= MIN_POINTS

    if init is not None:
        xi = check_channels(init, 6, "init").copy()
    elif params.warm_start:
        g = fit_global_rigid(target_flow, depth, reliable, rig)
        xi = np.broadcast_to(g.log(), (H, W, 6)).copy()
    else:
        xi = np.zeros((H, W, 6))
    lam = np.full((H, W), params.damping)

    def energies(field):
        R, t = exp_batch(field)
        return concat_rows(map_rows(lambda a, b: prob.energy(R[a:b], t[a:b], a, b), H, threads))

    def summary(E):
        sel = prob.count > 0
        return float(np.mean(np.sqrt(E[sel] / prob.count[sel])))

    E = energies(xi)
    history = [summary(E)]
    converged = False
    for _ in range(params.outer_iters):
        for _ in range(params.gn_iters):
            xi, E, lam = _data_step(prob, xi, E, lam, supported, threads)
        xi, E = _smooth_step(prob, xi, E, supported, params.lambda_smooth, energies)
        history.append(summary(E))
        if abs(history[-2] - history[-1]) < params.convergence_tol:
            converged = True
            break
    return FitReport(xi, history, converged, ~supported)


def _data_step(prob: _Problem, xi, E, lam, supported, threads):
    H = prob.H

    def block(r0, r1):
        x = xi[r0:r1]
        R, t = exp_batch(x)
        E0, A, g = prob.energy(R, t, r0, r1, with_normal=True)
        l = lam[r0:r1]
        diag = np.diagonal(A, axis1=-2, axis2=-1)
        A_d = A + (l[..., None] * (diag + 1e-12))[..., None] * np.eye(6)
        active = supported[r0:r1] & np.isfinite(E0) & (E0 > 0)
        A_d = np.where(active[..., None, None], A_d, np.eye(6))
        step = -np.linalg.solve(A_d, np.where(active[..., None], g, 0.0)[..., None])[..., 0]
        Rd, td = exp_batch(step)
        Rn, tn = compose_batch(Rd, td, R, t)
        E1 = prob.energy(Rn, tn, r0, r1)
        better = active & (E1 < E0)
        try:
            x_new = log_batch(Rn, tn)
        except BranchError:
            x_new = x
            better = np.zeros_like(better)
        x_out = np.where(better[..., None], x_new, x)
        E_out = np.where(better, E1, E0)
        l_out = np.where(better, l / 2, np.where(active, l * 10, l))
        return x_out, E_out, l_out

    return concat_rows(map_rows(block, H, threads))


def _smooth_step(prob: _Problem, xi, E, supported, lam_smooth, energies):
    r, H, W = prob.r, prob.H, prob.W
    pad = ((r, r), (r, r))
    xp = np.pad(xi, pad + ((0, 0),))
    sp = np.pad(supported, pad)
    vals, wts = [], []
    for dy, dx in prob.offsets:
        vals.append(xp[r + dy : r + dy + H, r + dx : r + dx + W])
        s = sp[r + dy : r + dy + H, r + dx : r + dx + W].astype(np.float64)
        wts.append(s if (dy, dx) == (0, 0) else lam_smooth * s)
    vals = np.stack(vals, axis=-1)  # H, W, 6, K
    wts = np.stack(wts, axis=-1)  # H, W, K
    total = wts.sum(axis=-1)
    med = _weighted_median(vals, wts[:, :, None, :])
    cand = np.where((total > 0)[..., None], med, xi)
    E1 = energies(cand)
    keep = E1 <= E * (1 + SMOOTH_SLACK)
    return np.where(keep[..., None], cand, xi), np.where(keep, E1, E)


def fit_global_rigid(target_flow, depth, reliable, rig: CameraRig, max_iters: int = 50) -> RigidMotion:
    """Single rigid motion minimising the squared reprojection error of reliable pixels.

    Damped Gauss-Newton from the identity; returns the best iterate.

    Raises:
        UnderConstrainedError: with fewer than 6 reliable pixels.
    """
    target_flow = check_channels(target_flow, 2, "target_flow")
    depth = check_channels(depth, 1, "depth")
    reliable = np.asarray(reliable, dtype=bool)
    check_same_shape(target_flow, depth, reliable, names=("target_flow", "depth", "reliable"))
    reliable = reliable & np.isfinite(depth) & (depth > 0) & np.all(np.isfinite(target_flow), axis=-1)
    if reliable.sum() < 6:
        raise UnderConstrainedError(f"need at least 6 reliable pixels, got {int(reliable.sum())}")
    H, W = depth.shape
    xs, ys = pixel_grid(H, W)
    P = unproject_unchecked(xs[reliable], ys[reliable], depth[reliable], rig)
    tgt = np.stack([xs[reliable], ys[reliable]], axis=-1) + target_flow[reliable]

    def cost(R, t):
        Q = apply_batch(R, t, P)
        if np.any(Q[:, 2] <= 0):
            return np.inf, None, None
        res = _project(Q, rig) - tgt
        return float(np.sum(res * res)), Q, res

    R, t = np.eye(3), np.zeros(3)
    E, Q, res = cost(R, t)
    lam = 1e-4
    for _ in range(max_iters):
        if E == 0:
            break
        J = _point_jacobian(Q, rig)
        A = np.einsum("nki,nkj->ij", J, J)
        g = np.einsum("nki,nk->i", J, res)
        A_d = A + lam * np.diag(np.diag(A) + 1e-12)
        step = -np.linalg.solve(A_d, g)
        Rd, td = exp_batch(step)
        Rn, tn = compose_batch(Rd, td, R, t)
        En, Qn, resn = cost(Rn, tn)
        if En < E:
            small = E - En <= 1e-15 * E
            R, t, E, Q, res = Rn, tn, En, Qn, resn
            lam /= 2
            if small or np.max(np.abs(step)) < 1e-14:
                break
        else:
            lam *= 10
            if lam > 1e12:
                break
    return RigidMotion(R, t)
