"""Flow, depth and scene-flow evaluation.

Outlier rule for flow and disparity: error > 3 px and > 5 % of the
ground-truth magnitude. A scene-flow outlier is a pixel that is an outlier
in any of D1, D2 or Fl. Splits with no pixels are reported as ``None``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .field import check_channels, check_same_shape

ABS_THRESH = 3.0
REL_THRESH = 0.05


def outliers(err, gt_mag) -> np.ndarray:
    return (err > ABS_THRESH) & (err > REL_THRESH * gt_mag)


def _mask(m, shape, default=True) -> np.ndarray:
    if m is None:
        return np.full(shape, default, dtype=bool)
    m = np.asarray(m)
    if m.ndim == 3:
        m = m[..., 0]
    return m.astype(bool)


def _mean(x, sel):
    n = int(sel.sum())
    return (float(x[sel].mean()), n) if n else (None, 0)


def _pct(x, sel):
    n = int(sel.sum())
    return (100.0 * float(x[sel].mean()), n) if n else (None, 0)


def eval_flow(pred, gt, valid, occ=None, fg=None) -> dict:
    """EPE (px) over all / non-occluded / occluded pixels and Fl (%) splits."""
    pred = check_channels(pred, 2, "pred")
    gt = check_channels(gt, 2, "gt")
    check_same_shape(pred, gt, names=("pred", "gt"))
    shape = pred.shape[:2]
    valid = _mask(valid, shape)
    occ = _mask(occ, shape, default=False)
    fgm = _mask(fg, shape, default=False)
    for name, m in (("valid", valid), ("occ", occ), ("fg", fgm)):
        if m.shape != shape:
            check_same_shape(pred, m, names=("pred", name))
    err = np.sqrt(np.sum((pred - gt) ** 2, axis=-1))
    mag = np.sqrt(np.sum(gt**2, axis=-1))
    out = outliers(err, mag)
    report, counts = {}, {}
    splits = {"all": valid, "noc": valid & ~occ, "occ": valid & occ}
    for name, sel in splits.items():
        report[f"epe_{name}"], counts[name] = _mean(err, sel)
    report["fl_all"], _ = _pct(out, splits["all"])
    report["fl_noc"], _ = _pct(out, splits["noc"])
    report["fl_bg"], counts["bg"] = _pct(out, valid & ~fgm)
    report["fl_fg"], counts["fg"] = _pct(out, valid & fgm)
    report["counts"] = counts
    return report


def eval_depth(pred, gt, valid, cap_m: float = 80.0) -> dict | None:
    """Standard monocular depth errors; ``None`` when no pixel qualifies.

    Ground truth beyond ``cap_m`` or non-positive is excluded and
    predictions are clamped to ``[1e-3, cap_m]``.
    """
    pred = check_channels(pred, 1, "pred")
    gt = check_channels(gt, 1, "gt")
    check_same_shape(pred, gt, names=("pred", "gt"))
    sel = _mask(valid, pred.shape) & np.isfinite(gt) & (gt > 0) & (gt <= cap_m) & np.isfinite(pred)
    n = int(sel.sum())
    if n == 0:
        return None
    p = np.clip(pred[sel], 1e-3, cap_m)
    g = gt[sel]
    ratio = np.maximum(p / g, g / p)
    d = p - g
    return {
        "abs_rel": float(np.mean(np.abs(d) / g)),
        "sq_rel": float(np.mean(d * d / g)),
        "rmse": float(np.sqrt(np.mean(d * d))),
        "rmse_log": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25**2)),
        "delta3": float(np.mean(ratio < 1.25**3)),
        "count": n,
    }


def eval_scene_flow(d1, d1_gt, d2, d2_gt, flow, flow_gt, valid, fg=None) -> dict:
    """D1, D2, Fl and SF outlier percentages over bg / fg / all pixels."""
    d1, d1_gt = check_channels(d1, 1, "d1"), check_channels(d1_gt, 1, "d1_gt")
    d2, d2_gt = check_channels(d2, 1, "d2"), check_channels(d2_gt, 1, "d2_gt")
    flow, flow_gt = check_channels(flow, 2, "flow"), check_channels(flow_gt, 2, "flow_gt")
    check_same_shape(d1, d1_gt, d2, d2_gt, flow, flow_gt, names=("d1", "d1_gt", "d2", "d2_gt", "flow", "flow_gt"))
    shape = d1.shape
    valid = _mask(valid, shape)
    fgm = _mask(fg, shape, default=False)
    o_d1 = outliers(np.abs(d1 - d1_gt), np.abs(d1_gt))
    o_d2 = outliers(np.abs(d2 - d2_gt), np.abs(d2_gt))
    o_fl = outliers(np.sqrt(np.sum((flow - flow_gt) ** 2, axis=-1)), np.sqrt(np.sum(flow_gt**2, axis=-1)))
    o_sf = o_d1 | o_d2 | o_fl
    report, counts = {}, {}
    for split, sel in (("bg", valid & ~fgm), ("fg", valid & fgm), ("all", valid)):
        for name, o in (("d1", o_d1), ("d2", o_d2), ("fl", o_fl), ("sf", o_sf)):
            report[f"{name}_{split}"], counts[split] = _pct(o, sel)
    report["counts"] = counts
    return report


@dataclass
class EvalReport:
    """Evaluation results; any part may be missing."""

    flow: dict | None = None
    depth: dict | None = None
    scene_flow: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"flow": self.flow, "depth": self.depth, "scene_flow": self.scene_flow, "meta": self.meta}

    def flat(self) -> dict:
        out = {}

        def walk(prefix, obj):
            if isinstance(obj, dict):
                for k in obj:
                    walk(f"{prefix}.{k}" if prefix else k, obj[k])
            else:
                out[prefix] = obj

        for part in ("flow", "depth", "scene_flow"):
            if getattr(self, part) is not None:
                walk(part, getattr(self, part))
        if self.meta:
            walk("meta", self.meta)
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.flat().items():
            if v is None:
                v = "absent"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
