"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of the pytest
terminal summary. Scenes are rendered at 256 x 384.
"""
import itertools
import math

import numpy as np
import pytest

from rigidflow import cli, synth
from rigidflow.errors import FormatError, IntegrityError, ParseError
from rigidflow.field import Field
from rigidflow.fitter import FitterParams, fit_global_rigid, fit_rigid_field, jacobian_reprojection
from rigidflow.fusion import (
    AVERAGE,
    FROM_S1,
    FROM_S2,
    S2_FALLBACK,
    condition_guard,
    fuse_flows,
    refine_disparity,
    refine_system,
    second_disparity_estimate,
    solve_normal,
)
from rigidflow.geometry import CameraRig, depth_to_disparity, disparity_to_depth, project, unproject
from rigidflow.io_formats import (
    parse_calibration,
    read_bundle,
    read_disparity_png,
    read_flow_png,
    write_bundle,
    write_disparity_png,
    write_flow_png,
)
from rigidflow.metrics import eval_depth, eval_flow, eval_scene_flow, outliers
from rigidflow.motion_field import reconstruct_flow
from rigidflow.occlusion import OcclusionParams, fb_occlusion
from rigidflow.se3 import apply_batch, compose_batch, exp_batch, inverse_batch, log_batch
from rigidflow.synth import SceneBundle

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance

H, W = 256, 384


def record(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def oracle():
    return {name: synth.generate(synth.preset(name, H, W)) for name in synth.PRESETS}


def motion_labels(motion):
    """Integer label per distinct twist value."""
    _, inv = np.unique(motion.reshape(-1, 6), axis=0, return_inverse=True)
    return inv.reshape(motion.shape[:2])


# 1 -------------------------------------------------------------------------------

def test_01_geometry_round_trips():
    rng = np.random.default_rng(1)
    n = 100_000
    worst_px = worst_z = worst_d = 0.0
    for k in range(10):
        rig = CameraRig(*rng.uniform(50, 2000, 2), *rng.uniform(-100, 1000, 2), rng.uniform(0.05, 2))
        m = n // 10
        p = np.stack([rng.uniform(-500, 1500, m), rng.uniform(-500, 1500, m)], axis=-1)
        z = np.exp(rng.uniform(np.log(0.1), np.log(1000), m))
        q, zz = project(unproject(p, z, rig), rig)
        worst_px = max(worst_px, float(np.abs(q - p).max()))
        worst_z = max(worst_z, float(np.abs(zz / z - 1).max()))
        d = -np.exp(rng.uniform(np.log(1e-2), np.log(500), m))
        worst_d = max(worst_d, float(np.abs(depth_to_disparity(disparity_to_depth(d, rig), rig) / d - 1).max()))
        worst_z = max(worst_z, float(np.abs(disparity_to_depth(depth_to_disparity(z, rig), rig) / z - 1).max()))
    ok = max(worst_px, worst_z, worst_d) < 1e-9
    record(1, "geometry round trips (1e5 samples)", ok,
           f"max pixel err {worst_px:.2e} px, depth rel err {worst_z:.2e}, disparity rel err {worst_d:.2e} (< 1e-9)")


# 2 -------------------------------------------------------------------------------

def test_02_se3_suite():
    rng = np.random.default_rng(2)
    n = 10_000

    def sample(k):
        axis = rng.normal(size=(k, 3))
        axis /= np.linalg.norm(axis, axis=1, keepdims=True)
        angle = rng.uniform(0, np.pi - 1e-3, (k, 1))
        return np.concatenate([rng.normal(scale=3, size=(k, 3)), axis * angle], axis=1)

    xa, xb, xc = sample(n), sample(n), sample(n)
    Ra, ta = exp_batch(xa)
    Rb, tb = exp_batch(xb)
    Rc, tc = exp_batch(xc)
    errs = {}
    errs["log(exp)"] = np.abs(log_batch(Ra, ta) - xa).max()
    xr = log_batch(Ra, ta)
    R2, t2 = exp_batch(xr)
    errs["exp(log)"] = max(np.abs(R2 - Ra).max(), np.abs(t2 - ta).max())
    L = compose_batch(*compose_batch(Ra, ta, Rb, tb), Rc, tc)
    Rr = compose_batch(Ra, ta, *compose_batch(Rb, tb, Rc, tc))
    errs["associativity"] = max(np.abs(L[0] - Rr[0]).max(), np.abs(L[1] - Rr[1]).max())
    Ri, ti = inverse_batch(Ra, ta)
    I, z = compose_batch(Ra, ta, Ri, ti)
    errs["inverse"] = max(np.abs(I - np.eye(3)).max(), np.abs(z).max())
    Id, zd = compose_batch(np.broadcast_to(np.eye(3), Ra.shape), np.zeros_like(ta), Ra, ta)
    errs["identity"] = max(np.abs(Id - Ra).max(), np.abs(zd - ta).max())
    P, Q = rng.normal(scale=5, size=(2, n, 3))
    before = np.linalg.norm(P - Q, axis=1)
    after = np.linalg.norm(apply_batch(Ra, ta, P) - apply_batch(Ra, ta, Q), axis=1)
    errs["distance"] = np.abs(after - before).max()
    errs["orthonormal"] = np.abs(np.einsum("nji,njk->nik", Ra, Ra) - np.eye(3)).max()
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(2, "SE(3) suite (1e4 elements)", worst < 1e-9, detail + " (< 1e-9)")


# 3 -------------------------------------------------------------------------------

def test_03_reconstruction_exactness(oracle):
    worst = {}
    for name, b in oracle.items():
        out = reconstruct_flow(b["disp1"], b["motion_gt"], b.rig)
        v = out.valid & b.mask("valid1")
        worst[name] = float(np.linalg.norm(out.flow - b["flow_gt"], axis=-1)[v].max())
    ok = max(worst.values()) < 1e-9
    record(3, "reconstruction exactness (5 scenes)", ok,
           "max EPE " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " px (< 1e-9)")


# 4 -------------------------------------------------------------------------------

def test_04_jacobian_check():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        rig = CameraRig(*rng.uniform(100, 1000, 2), *rng.uniform(0, 500, 2), 0.5)
        xi = np.concatenate([rng.normal(scale=0.5, size=3), rng.normal(scale=0.2, size=3)])
        depth = rng.uniform(2, 50)
        x = rng.uniform(0, 2 * np.array([rig.cx, rig.cy]) + 1)
        P = unproject(x, depth, rig)
        R, t = exp_batch(xi)
        if apply_batch(R, t, P)[2] < 0.5:
            continue
        J = jacobian_reprojection(xi, x, depth, rig)
        h = 1e-6
        Jn = np.zeros((2, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            up = project(apply_batch(*compose_batch(*exp_batch(d), R, t), P), rig)[0]
            dn = project(apply_batch(*compose_batch(*exp_batch(-d), R, t), P), rig)[0]
            Jn[:, k] = (up - dn) / (2 * h)
        worst = max(worst, np.linalg.norm(J - Jn) / np.linalg.norm(J))
    record(4, "analytic Jacobian vs central differences (1000 configs)", worst < 1e-4,
           f"max relative error {worst:.2e} (< 1e-4)")


# 5 -------------------------------------------------------------------------------

def interior_mask(reliable, labels, radius):
    """Pixels whose whole (2r+1)^2 window lies on reliable pixels of a single body."""
    from scipy import ndimage

    full = ndimage.minimum_filter(reliable.astype(np.uint8), size=2 * radius + 1, mode="constant") == 1
    return full & (synth.motion_boundary_distance(labels) > radius)


def fit_and_score(b, rep, radius):
    rel = ~b.mask("occ_flow_gt") & b.mask("valid1")
    out = reconstruct_flow(b["disp1"], rep.motion, b.rig)
    labels = motion_labels(b["motion_gt"])
    interior = interior_mask(rel, labels, radius) & out.valid
    loose = rel & ~rep.underconstrained & (synth.motion_boundary_distance(labels) > radius) & out.valid
    twist_err = np.linalg.norm(rep.motion - b["motion_gt"], axis=-1)
    epe = np.linalg.norm(out.flow - b["flow_gt"], axis=-1)
    per_body = {}
    for lab in np.unique(labels):
        sel = interior & (labels == lab)
        if sel.any():
            per_body[int(lab)] = (float(twist_err[sel].max()), float(epe[sel].mean()), int(sel.sum()))
    extra = (int((loose & ~interior).sum()), float(twist_err[loose].max()), float(epe[loose].mean()))
    h = rep.residual_history
    monotone = all(h[i + 1] <= h[i] * (1 + 1e-6) for i in range(len(h) - 1))
    return per_body, monotone, extra


@pytest.fixture(scope="module")
def fits(oracle):
    out = {}
    for name in ("camera-motion", "moving-box"):
        b = oracle[name]
        rel = ~b.mask("occ_flow_gt") & b.mask("valid1")
        out[name] = fit_rigid_field(b["flow_gt"], b["depth1"], rel, b.rig, FitterParams())
    return out


def test_05_fitter_recovery(oracle, fits):
    r = FitterParams().window_radius
    single, mono1, x1 = fit_and_score(oracle["camera-motion"], fits["camera-motion"], r)
    two, mono2, x2 = fit_and_score(oracle["moving-box"], fits["moving-box"], r)
    ok_single = len(single) == 1 and all(t < 1e-3 and e < 0.05 for t, e, _ in single.values())
    ok_two = len(two) == 2 and all(t < 1e-3 and e < 0.05 for t, e, _ in two.values())
    fmt = lambda d: "; ".join(f"body {k}: twist {t:.1e}, EPE {e:.1e} px, n={n}" for k, (t, e, n) in d.items())
    record(5, "fitter recovery", ok_single and ok_two and mono1 and mono2,
           f"single [{fmt(single)}]; two-body [{fmt(two)}]; history monotone {mono1 and mono2} "
           f"(twist < 1e-3, EPE < 0.05 px; interior = full reliable single-body window. "
           f"Including the {x1[0]} + {x2[0]} supported pixels with partially reliable windows: "
           f"max twist {max(x1[1], x2[1]):.1e}, mean EPE {max(x1[2], x2[2]):.1e} px)")


# 6 -------------------------------------------------------------------------------

def test_06_egomotion_gap(oracle, fits):
    b = oracle["moving-box"]
    rel = ~b.mask("occ_flow_gt") & b.mask("valid1")
    g = fit_global_rigid(b["flow_gt"], b["depth1"], rel, b.rig)
    flow_global = reconstruct_flow(b["disp1"], np.broadcast_to(g.log(), (H, W, 6)), b.rig).flow
    rep = fits["moving-box"]
    flow_field = reconstruct_flow(b["disp1"], rep.motion, b.rig).flow
    fg = b.mask("fg")
    valid = b.mask("valid1")
    fl_global = eval_flow(flow_global, b["flow_gt"], valid, fg=fg)["fl_fg"]
    fl_field = eval_flow(flow_field, b["flow_gt"], valid, fg=fg)["fl_fg"]
    gap = fl_global - fl_field
    record(6, "egomotion gap on moving-box foreground", gap >= 10.0,
           f"Fl-fg global {fl_global:.2f}% vs field {fl_field:.2f}% (gap {gap:.2f} pp >= 10)")


# 7 -------------------------------------------------------------------------------

def boundary_band(object_id, occ, width=2):
    from scipy import ndimage

    edges = np.zeros(object_id.shape, bool)
    for a in (object_id, occ.astype(int)):
        dx = a[:, 1:] != a[:, :-1]
        dy = a[1:] != a[:-1]
        edges[:, 1:] |= dx
        edges[:, :-1] |= dx
        edges[1:] |= dy
        edges[:-1] |= dy
    return ndimage.binary_dilation(edges, np.ones((3, 3), bool), iterations=width)


def test_07_occlusion_agreement(oracle):
    results = {}
    for name, b in oracle.items():
        occ = fb_occlusion(b["flow_gt"], b["flow_bw_gt"], OcclusionParams(0.01, 0.5))
        truth = b.mask("occ_flow_gt")
        keep = ~boundary_band(b["object_id"], truth)
        results[name] = 100.0 * float(np.mean(occ[keep] == truth[keep]))
    ok = min(results.values()) >= 97.0
    record(7, "forward-backward occlusion vs z-buffer oracle", ok,
           ", ".join(f"{k} {v:.2f}%" for k, v in results.items()) + " agreement (>= 97%)")


# 8 -------------------------------------------------------------------------------

def test_08a_refinement_fixed_point(oracle):
    worst, applied = 0.0, 0
    for name in ("camera-translation", "camera-motion", "moving-box", "three-bodies"):
        b = oracle[name]
        out = reconstruct_flow(b["disp1"], b["motion_gt"], b.rig)
        d2 = np.where(out.valid, -b.rig.fxb / np.where(out.valid, out.new_depth, 1.0), 0.0)
        res = refine_disparity(b["disp1"], d2, out.flow, b["motion_gt"], b.rig)
        worst = max(worst, float(np.abs(res.delta1).max()), float(np.abs(res.delta2).max()))
        applied += int(res.applied.sum())
    record("8a", "refinement idempotent on consistent inputs", worst < 1e-9 and applied > 0,
           f"max |delta| {worst:.1e} px over {applied} applied pixels (< 1e-9)")


def grid_minimize(B, gamma, lo=-3.0, hi=3.0, step=0.01, levels=3, half_width=20):
    """Brute-force argmin of |B d - gamma| on a grid, re-gridded 10x finer around each optimum."""
    c1, c2 = (lo + hi) / 2, (lo + hi) / 2
    n = int(round((hi - lo) / (2 * step)))
    for _ in range(levels):
        k = np.arange(-n, n + 1) * step
        g1, g2 = np.meshgrid(c1 + k, c2 + k, indexing="ij")
        res = B[:, 0, None, None] * g1 + B[:, 1, None, None] * g2 - gamma[:, None, None]
        cost = np.einsum("kij,kij->ij", res, res)
        i, j = np.unravel_index(np.argmin(cost), cost.shape)
        c1, c2 = g1[i, j], g2[i, j]
        step, n = step / 10, half_width * 10
    return np.array([c1, c2]), cost.min()


def test_08b_closed_form_vs_grid_search():
    """Well-conditioned means a singular-value ratio of B below 100."""
    rng = np.random.default_rng(8)
    step = 0.01
    done, bad, worst, cost_gap = 0, 0, 0.0, np.inf
    while done < 1000:
        rig = CameraRig(*rng.uniform(300, 800, 2), *rng.uniform(200, 400, 2), rng.uniform(0.3, 1.0))
        x = rng.uniform(0, 2 * np.array([rig.cx, rig.cy]))
        z1 = rng.uniform(3, 15)
        xi = np.concatenate([rng.uniform(-2, 2, 3), rng.normal(scale=0.05, size=3)])
        R, t = exp_batch(xi)
        Q = apply_batch(R, t, unproject(x, z1, rig))
        if Q[2] < 1:
            continue
        q, z2 = project(Q, rig)
        d1 = -rig.fxb / z1 + rng.uniform(-1.5, 1.5)
        d2 = -rig.fxb / z2 + rng.uniform(-1.5, 1.5)
        if d1 >= -1 or d2 >= -1:
            continue
        B, gamma = refine_system(np.array(d1), np.array(d2), q - x, xi, rig, np.array(x[0]), np.array(x[1]))
        if condition_guard(B, 100.0):
            continue
        sol = solve_normal(B, gamma)
        if np.any(np.abs(sol) > 2.9):
            continue
        brute, brute_cost = grid_minimize(B, gamma, step=step)
        dev = float(np.abs(brute - sol).max())
        worst = max(worst, dev)
        r = B @ sol - gamma
        cost_gap = min(cost_gap, brute_cost - float(r @ r))
        bad += dev > step
        done += 1
    record("8b", "closed form vs grid search (1000 instances)", bad == 0 and cost_gap > -1e-15,
           f"{bad} of {done} instances differ by more than the {step} px grid step; max deviation {worst:.1e} px; "
           f"closed-form cost never above the grid minimum (min gap {cost_gap:.1e})")


def test_08c_perturbed_refinement(oracle):
    b = oracle["moving-box"]
    rng = np.random.default_rng(80)
    noisy = b["disp1"] + rng.choice([-0.5, 0.5], size=b["disp1"].shape)
    d2w = second_disparity_estimate(b["disp2"], b["flow_gt"], b.mask("occ_flow_gt"))
    res = refine_disparity(noisy, d2w, b["flow_gt"], b["motion_gt"], b.rig)
    r1, _ = res.refined(noisy, d2w)
    a = res.applied
    frac = float(np.mean(np.abs(r1 - b["disp1"])[a] <= 0.5 * np.abs(noisy - b["disp1"])[a]))
    record("8c", "refinement halves +-0.5 px disparity error", frac >= 0.8 and a.sum() > 0,
           f"{100 * frac:.1f}% of {int(a.sum())} applied pixels reach <= 50% of the perturbed error (>= 80%)")


def test_08d_forward_motion_rejected(oracle):
    b = oracle["camera-translation"]
    rig = b.rig
    x = np.array([rig.cx + 0.1, rig.cy - 0.05])
    z1 = 10.0
    motion = np.array([0.0, 0.0, -1.0, 0, 0, 0])
    R, t = exp_batch(motion)
    q, z2 = project(apply_batch(R, t, unproject(x, z1, rig)), rig)
    B, gamma = refine_system(np.array(-rig.fxb / z1), np.array(-rig.fxb / z2), q - x, motion, rig,
                             np.array(x[0]), np.array(x[1]))
    s = np.linalg.svd(B, compute_uv=False)
    rejected = bool(condition_guard(B))
    record("8d", "forward-motion degenerate instance rejected", rejected,
           f"singular-value ratio {s[0] / s[1]:.3g} at 0.11 px from the principal point (threshold 1e4)")


# 9 -------------------------------------------------------------------------------

TRUTH_TABLE = {
    # (stage-1 reliable, stage-2 reliable): (flow from s1=(2,0), s2=(4,0), provenance)
    (True, True): ((3.0, 0.0), AVERAGE),
    (True, False): ((2.0, 0.0), FROM_S1),
    (False, True): ((4.0, 0.0), FROM_S2),
    (False, False): ((4.0, 0.0), S2_FALLBACK),
}


def test_09_fusion_rule_table():
    cases = list(itertools.product([False, True], repeat=2))
    mismatches = 0
    total = 0
    for assignment in itertools.product(cases, repeat=4):
        ok1 = np.array([a[0] for a in assignment]).reshape(2, 2)
        ok2 = np.array([a[1] for a in assignment]).reshape(2, 2)
        flow, prov = fuse_flows(np.broadcast_to([2.0, 0.0], (2, 2, 2)), ~ok1,
                                np.broadcast_to([4.0, 0.0], (2, 2, 2)), ~ok2)
        for y, x in np.ndindex(2, 2):
            want_flow, want_prov = TRUTH_TABLE[(bool(ok1[y, x]), bool(ok2[y, x]))]
            mismatches += tuple(flow[y, x]) != want_flow or prov[y, x] != want_prov
            total += 1
    record(9, "fusion rule table (all 2x2 mask pairs)", mismatches == 0,
           f"{mismatches} mismatches over {total} pixels of 256 mask assignments")


# 10 ------------------------------------------------------------------------------

def _out(e, m):
    return e > 3.0 and e > 0.05 * m


def test_10_metrics():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        gt = rng.normal(scale=20, size=(8, 8, 2))
        pred = gt + rng.normal(scale=4, size=(8, 8, 2))
        valid, occ, fg = (rng.random((8, 8)) < p for p in (0.9, 0.3, 0.4))
        r = eval_flow(pred, gt, valid, occ, fg)
        errs = [math.hypot(*(pred[y, x] - gt[y, x])) for y, x in np.ndindex(8, 8) if valid[y, x]]
        worst = max(worst, abs(r["epe_all"] - sum(errs) / len(errs)))
        fl = [_out(math.hypot(*(pred[y, x] - gt[y, x])), math.hypot(*gt[y, x]))
              for y, x in np.ndindex(8, 8) if valid[y, x] and fg[y, x]]
        if fl:
            worst = max(worst, abs(r["fl_fg"] - 100 * sum(fl) / len(fl)))
        noc = [math.hypot(*(pred[y, x] - gt[y, x])) for y, x in np.ndindex(8, 8) if valid[y, x] and not occ[y, x]]
        if noc:
            worst = max(worst, abs(r["epe_noc"] - sum(noc) / len(noc)))
        dg = rng.uniform(1, 90, (8, 8))
        dp = dg * rng.uniform(0.7, 1.5, (8, 8))
        rd = eval_depth(dp, dg, valid)
        rows = [(min(max(dp[y, x], 1e-3), 80.0), dg[y, x]) for y, x in np.ndindex(8, 8) if valid[y, x] and dg[y, x] <= 80]
        n = len(rows)
        worst = max(worst, abs(rd["abs_rel"] - sum(abs(p - g) / g for p, g in rows) / n))
        worst = max(worst, abs(rd["rmse"] - math.sqrt(sum((p - g) ** 2 for p, g in rows) / n)))
        worst = max(worst, abs(rd["delta1"] - sum(max(p / g, g / p) < 1.25 for p, g in rows) / n))
        d1g, d2g = -rng.uniform(1, 80, (2, 8, 8))
        d1, d2 = d1g + rng.normal(scale=4, size=(8, 8)), d2g + rng.normal(scale=4, size=(8, 8))
        rs = eval_scene_flow(d1, d1g, d2, d2g, pred, gt, valid, fg)
        sf = [_out(abs(d1[y, x] - d1g[y, x]), abs(d1g[y, x])) or _out(abs(d2[y, x] - d2g[y, x]), abs(d2g[y, x]))
              or _out(math.hypot(*(pred[y, x] - gt[y, x])), math.hypot(*gt[y, x]))
              for y, x in np.ndindex(8, 8) if valid[y, x]]
        worst = max(worst, abs(rs["sf_all"] - 100 * sum(sf) / len(sf)))
    z = np.zeros((3, 3, 2))
    epe5 = eval_flow(z + [3.0, 4.0], z, None)["epe_all"] == 5.0
    thr = bool(outliers(np.array(4.0), np.array(10.0))) and not bool(outliers(np.array(2.9), np.array(10.0)))
    g = np.linspace(1, 60, 9).reshape(3, 3)
    rd = eval_depth(1.3 * g, g, None)
    delta = rd["delta1"] == 0 and rd["delta2"] == 1 and rd["delta3"] == 1 and abs(rd["abs_rel"] - 0.3) < 1e-15
    ok = worst <= 1e-12 and epe5 and thr and delta
    record(10, "metrics vs brute-force loops (100 instances)", ok,
           f"max deviation {worst:.1e} (<= 1e-12); EPE(3,4)=5 {epe5}; thresholds {thr}; 1.3x depth pattern {delta}")


# 11 ------------------------------------------------------------------------------

def test_11_io(tmp_path):
    rng = np.random.default_rng(11)
    failures = 0
    for k in range(100):
        h, w = rng.integers(1, 40, 2)
        flow = rng.integers(-32768, 32768, (h, w, 2)) / 64.0
        valid = rng.random((h, w)) < 0.9
        write_flow_png(tmp_path / "f.png", flow, valid)
        f2, v2 = read_flow_png(tmp_path / "f.png")
        failures += not (np.array_equal(v2, valid) and np.array_equal(f2[valid], flow[valid]))
        disp = -rng.integers(1, 65536, (h, w)) / 256.0
        write_disparity_png(tmp_path / "d.png", disp)
        d2, dv = read_disparity_png(tmp_path / "d.png")
        failures += not (dv.all() and np.array_equal(d2, disp))
        fields = {"flow": Field(rng.normal(size=(h, w, 2)), "flow"), "motion": Field(rng.normal(size=(h, w, 6)), "twist6"),
                  "disp": Field(-rng.random((h, w)), "disparity")}
        b = SceneBundle(rig=CameraRig(500, 500, 10, 10, 0.5), fields=fields, meta={"k": k})
        write_bundle(tmp_path / f"b{k}", b)
        failures += read_bundle(tmp_path / f"b{k}") != b
    typed = []
    (tmp_path / "junk.png").write_bytes(b"junk")
    for fn, exc in ((lambda: read_flow_png(tmp_path / "junk.png"), FormatError),
                    (lambda: read_disparity_png(tmp_path / "f.png"), FormatError),
                    (lambda: parse_calibration("P2: 1 0 0 0 0 1 0 0 0 0 1 0"), ParseError),
                    (lambda: read_bundle(tmp_path / "missing"), IntegrityError)):
        try:
            fn()
            typed.append(False)
        except exc:
            typed.append(True)
    np.save(tmp_path / "b0" / "flow.npy", np.zeros((1, 1, 2)))
    try:
        read_bundle(tmp_path / "b0")
        typed.append(False)
    except IntegrityError:
        typed.append(True)
    ok = failures == 0 and all(typed)
    record(11, "I/O round trips and typed errors", ok,
           f"{failures} of 300 round trips not bit-exact; {sum(typed)} of {len(typed)} malformed inputs raised typed errors")


# 12 ------------------------------------------------------------------------------

def run_pipeline(root, threads):
    s = root / "scene"
    steps = [
        ["synth", "--preset", "moving-box", "--height", "48", "--width", "64", "--out", s],
        ["fit", "--flow", f"{s}:flow_gt", "--depth", f"{s}:depth1", "--occ", f"{s}:occ_flow_gt",
         "--outer-iters", "3", "--out", root / "fit"],
        ["reconstruct", "--disp", f"{s}:disp1", "--motion", f"{root / 'fit'}:motion", "--out", root / "rec"],
        ["occlusion", "--forward", f"{s}:flow_gt", "--backward", f"{s}:flow_bw_gt", "--out", root / "occ"],
        ["fuse", "--flow-s1", f"{s}:flow_gt", "--occ-s1", f"{root / 'occ'}:occ", "--flow-s2", f"{root / 'rec'}:flow",
         "--occ-disp", f"{s}:occ_disp_gt", "--out", root / "fused"],
        ["refine", "--d1", f"{s}:disp1", "--d2", f"{s}:disp2", "--flow", f"{root / 'fused'}:flow",
         "--motion", f"{root / 'fit'}:motion", "--occ-flow", f"{root / 'occ'}:occ", "--out", root / "ref"],
        ["eval", "--flow", f"{root / 'fused'}:flow", "--flow-gt", f"{s}:flow_gt", "--fg", f"{s}:fg",
         "--d1", f"{root / 'ref'}:disp1_refined", "--d1-gt", f"{s}:disp1", "--d2", f"{root / 'ref'}:disp1_refined",
         "--d2-gt", f"{s}:disp1", "--report-out", root / "report.json"],
    ]
    for argv in steps:
        code = cli.main([str(a) for a in argv] + ["--threads", str(threads)])
        assert code == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_12_determinism(tmp_path, capsys):
    runs = [run_pipeline(tmp_path / f"run{i}", threads) for i, threads in enumerate((1, 1, 4))]
    capsys.readouterr()
    same = runs[0] == runs[1] == runs[2]
    record(12, "pipeline determinism across runs and thread counts", same and len(runs[0]) > 10,
           f"{len(runs[0])} output files byte-identical over 2 runs with 1 thread and 1 with 4: {same}")
