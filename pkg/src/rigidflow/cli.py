"""Command-line entry point: one subcommand per pipeline stage.

Field inputs are given as references:

* ``path.png``   flow / disparity / mask PNG (see FORMATS.md)
* ``path.npy``   raw (H, W[, C]) float array in in-memory conventions
* ``DIR:KEY``    field ``KEY`` of a bundle directory

Outputs are bundle directories. Exit codes: 0 ok, 2 usage, 3 format,
4 dimension, 5 numerical.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import DimensionError, FormatError, ParameterError, RigidFlowError, UsageError
from .field import Field, mask_field
from .fitter import FitterParams, fit_rigid_field
from .fusion import fuse_flows, refine_disparity, second_disparity_estimate
from .geometry import CameraRig
from .io_formats import (
    MANIFEST,
    load_npy,
    load_rig,
    read_bundle,
    read_disparity_png,
    read_flow_png,
    read_mask_png,
    write_bundle,
    write_disparity_png,
    write_flow_png,
)
from .metrics import EvalReport, eval_depth, eval_flow, eval_scene_flow
from .motion_field import reconstruct_flow
from .occlusion import OcclusionParams, fb_occlusion
from .parallel import THREADS_ENV, default_threads
from .synth import PRESETS, SceneBundle, generate, load_spec, perturb, preset
from .viz import disparity_to_rgb, flow_to_rgb, motion_to_rgb, save_rgb

log = logging.getLogger("rigidflow")

EXIT_CODES = {"usage": 2, "format": 3, "dimension": 4, "numerical": 5}
CHANNELS = {"flow": 2, "disparity": 1, "depth": 1, "mask": 1, "twist6": 6, "label": 1}


class _Inputs:
    """Loads field references and remembers the first bundle rig seen."""

    def __init__(self):
        self.bundles = {}
        self.rig = None

    def bundle(self, path) -> SceneBundle:
        path = str(Path(path))
        if path not in self.bundles:
            b = read_bundle(path)
            self.bundles[path] = b
            if self.rig is None and b.rig is not None:
                self.rig = b.rig
        return self.bundles[path]

    def load(self, ref: str, kind: str, flag: str):
        """Return ``(array, valid or None)`` for a field reference."""
        if ref is None:
            raise UsageError(f"{flag} is required")
        head, sep, key = ref.rpartition(":")
        if sep and (Path(head) / MANIFEST).is_file():
            b = self.bundle(head)
            if key not in b:
                raise FormatError(f"{flag}: bundle {head} has no field {key!r}")
            a = b[key]
            if kind == "mask":
                a = a.astype(bool)
            return self._check(a, kind, flag), None
        path = Path(ref)
        if not path.is_file():
            raise UsageError(f"{flag}: no such file {ref}")
        if path.suffix.lower() == ".png":
            if kind == "flow":
                return read_flow_png(path)
            if kind == "disparity":
                return read_disparity_png(path)
            if kind == "mask":
                return read_mask_png(path), None
            raise FormatError(f"{flag}: {kind} fields cannot be read from PNG")
        if path.suffix.lower() == ".npy":
            a = load_npy(path)
            if kind == "mask":
                a = a.astype(bool)
            return self._check(a, kind, flag), None
        raise FormatError(f"{flag}: unsupported file type {path.suffix!r}")

    @staticmethod
    def _check(a, kind, flag):
        c = CHANNELS[kind]
        if a.ndim == 3 and a.shape[2] == 1 and c == 1:
            a = a[..., 0]
        ok = a.ndim == 2 if c == 1 else (a.ndim == 3 and a.shape[2] == c)
        if not ok:
            raise DimensionError(f"{flag}: expected a {kind} field with {c} channel(s), got shape {a.shape}")
        return a


def _rig(args, inputs: _Inputs) -> CameraRig:
    inline = [args.fx, args.fy, args.cx, args.cy, args.baseline]
    if args.rig:
        if not Path(args.rig).is_file():
            raise UsageError(f"--rig: no such file {args.rig}")
        return load_rig(args.rig)
    if any(v is not None for v in inline):
        if any(v is None for v in inline):
            raise UsageError("inline rig needs all of --fx --fy --cx --cy --baseline")
        return CameraRig(*inline)
    if inputs.rig is not None:
        return inputs.rig
    raise UsageError("no camera rig: pass --rig, the inline --fx/--fy/--cx/--cy/--baseline flags, or a bundle input")


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    elif text:
        sys.stdout.write(text)


def _out_bundle(args, rig, fields: dict, meta: dict) -> None:
    write_bundle(args.out, SceneBundle(rig=rig, fields=fields, meta=meta))
    log.info("wrote %s", args.out)


# ---- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    if (args.spec is None) == (args.preset is None):
        raise UsageError("give exactly one of SPEC or --preset")
    if args.spec:
        if not Path(args.spec).is_file():
            raise UsageError(f"no such scene file {args.spec}")
        spec = load_spec(args.spec)
    else:
        spec = preset(args.preset, args.height, args.width, args.seed)
    bundle = generate(spec)
    if spec.flow_sigma > 0 or spec.disp_sigma > 0:
        bundle = perturb(bundle, spec.flow_sigma, spec.disp_sigma, spec.seed)
    write_bundle(args.out, bundle)
    _emit(args, {"out": str(args.out), "fields": sorted(bundle.fields)}, f"wrote {args.out}\n")
    return 0


def cmd_reconstruct(args) -> int:
    inputs = _Inputs()
    disp, dvalid = inputs.load(args.disp, "disparity", "--disp")
    motion, _ = inputs.load(args.motion, "twist6", "--motion")
    rig = _rig(args, inputs)
    out = reconstruct_flow(disp, motion, rig, valid=dvalid, threads=args.threads)
    fields = {"flow": Field(out.flow, "flow"), "new_depth": Field(out.new_depth, "depth"), "valid": mask_field(out.valid)}
    _out_bundle(args, rig, fields, {"command": "reconstruct"})
    if args.flow_png:
        write_flow_png(args.flow_png, out.flow, out.valid)
    _emit(args, {"valid_fraction": float(out.valid.mean())}, f"valid pixels: {out.valid.mean():.4f}\n")
    return 0


def cmd_fit(args) -> int:
    inputs = _Inputs()
    flow, fvalid = inputs.load(args.flow, "flow", "--flow")
    if (args.depth is None) == (args.disp is None):
        raise UsageError("give exactly one of --depth or --disp")
    if args.depth:
        depth, _ = inputs.load(args.depth, "depth", "--depth")
    else:
        disp, _ = inputs.load(args.disp, "disparity", "--disp")
    reliable = np.ones(flow.shape[:2], dtype=bool) if fvalid is None else fvalid.copy()
    if args.reliable:
        reliable &= inputs.load(args.reliable, "mask", "--reliable")[0]
    for ref in args.occ or []:
        reliable &= ~inputs.load(ref, "mask", "--occ")[0]
    rig = _rig(args, inputs)
    if args.disp:
        ok = np.isfinite(disp) & (disp < 0)
        depth = np.where(ok, rig.fxb / np.where(ok, np.abs(disp), 1.0), 0.0)
    params = FitterParams(
        lambda_smooth=args.lambda_smooth,
        outer_iters=args.outer_iters,
        gn_iters=args.gn_iters,
        damping=args.damping,
        window_radius=args.window_radius,
        convergence_tol=args.convergence_tol,
        warm_start=args.warm_start,
    )
    rep = fit_rigid_field(flow, depth, reliable, rig, params, threads=args.threads)
    fields = {"motion": Field(rep.motion, "twist6"), "underconstrained": mask_field(rep.underconstrained)}
    meta = {"command": "fit", "residual_history": rep.residual_history, "converged": rep.converged}
    _out_bundle(args, rig, fields, meta)
    text = f"converged: {rep.converged}\nresidual px: {rep.residual_history[0]:.6g} -> {rep.residual_history[-1]:.6g}\n"
    _emit(args, {"residual_history": rep.residual_history, "converged": rep.converged}, text)
    return 0


def cmd_fuse(args) -> int:
    inputs = _Inputs()
    f1, _ = inputs.load(args.flow_s1, "flow", "--flow-s1")
    o1, _ = inputs.load(args.occ_s1, "mask", "--occ-s1")
    f2, _ = inputs.load(args.flow_s2, "flow", "--flow-s2")
    od, _ = inputs.load(args.occ_disp, "mask", "--occ-disp")
    flow, prov = fuse_flows(f1, o1, f2, od)
    fields = {"flow": Field(flow, "flow"), "provenance": Field(prov.astype(np.float64), "label")}
    _out_bundle(args, inputs.rig, fields, {"command": "fuse"})
    counts = {str(k): int((prov == k).sum()) for k in range(4)}
    text = "provenance counts (avg, s1, s2, fallback): " + ", ".join(str(v) for v in counts.values()) + "\n"
    _emit(args, {"provenance_counts": counts}, text)
    return 0


def cmd_refine(args) -> int:
    inputs = _Inputs()
    d1, _ = inputs.load(args.d1, "disparity", "--d1")
    d2, _ = inputs.load(args.d2, "disparity", "--d2")
    flow, _ = inputs.load(args.flow, "flow", "--flow")
    motion, _ = inputs.load(args.motion, "twist6", "--motion")
    occ = inputs.load(args.occ_flow, "mask", "--occ-flow")[0] if args.occ_flow else None
    rig = _rig(args, inputs)
    d2_hat = d2 if args.d2_warped else second_disparity_estimate(d2, flow, occ)
    res = refine_disparity(d1, d2_hat, flow, motion, rig, args.cond_threshold, args.max_delta, threads=args.threads)
    r1, r2 = res.refined(d1, d2_hat)
    ok1 = np.isfinite(r1) & (r1 < 0)
    ok2 = np.isfinite(r2) & (r2 < 0)
    fields = {
        "delta1": Field(res.delta1, "scalar"),
        "delta2": Field(res.delta2, "scalar"),
        "applied": mask_field(res.applied),
        "disp1_refined": Field(np.where(ok1, r1, 0.0), "disparity"),
        "disp2_refined": Field(np.where(ok2, r2, 0.0), "disparity"),
    }
    _out_bundle(args, rig, fields, {"command": "refine"})
    if args.disp_png:
        write_disparity_png(args.disp_png, np.where(ok1, r1, 0.0), ok1)
    _emit(args, {"applied_fraction": float(res.applied.mean())}, f"refined pixels: {res.applied.mean():.4f}\n")
    return 0


def cmd_eval(args) -> int:
    inputs = _Inputs()
    report = EvalReport()
    valid = inputs.load(args.valid, "mask", "--valid")[0] if args.valid else None
    fg = inputs.load(args.fg, "mask", "--fg")[0] if args.fg else None
    if args.flow or args.flow_gt:
        flow, _ = inputs.load(args.flow, "flow", "--flow")
        gt, gvalid = inputs.load(args.flow_gt, "flow", "--flow-gt")
        occ = inputs.load(args.occ, "mask", "--occ")[0] if args.occ else None
        v = _combine(valid, gvalid, gt.shape[:2])
        report.flow = eval_flow(flow, gt, v, occ, fg)
    if args.depth or args.depth_gt:
        p, _ = inputs.load(args.depth, "depth", "--depth")
        g, _ = inputs.load(args.depth_gt, "depth", "--depth-gt")
        report.depth = eval_depth(p, g, _combine(valid, None, g.shape), args.depth_cap)
    sf = [args.d1, args.d1_gt, args.d2, args.d2_gt]
    if any(sf):
        if not all(sf) or not (args.flow and args.flow_gt):
            raise UsageError("scene-flow evaluation needs --d1 --d1-gt --d2 --d2-gt --flow --flow-gt")
        d1, _ = inputs.load(args.d1, "disparity", "--d1")
        d1g, v1 = inputs.load(args.d1_gt, "disparity", "--d1-gt")
        d2, _ = inputs.load(args.d2, "disparity", "--d2")
        d2g, v2 = inputs.load(args.d2_gt, "disparity", "--d2-gt")
        v = _combine(valid, v1, d1g.shape)
        v = _combine(v, v2, d1g.shape)
        flow, _ = inputs.load(args.flow, "flow", "--flow")
        gt, gvalid = inputs.load(args.flow_gt, "flow", "--flow-gt")
        report.scene_flow = eval_scene_flow(d1, d1g, d2, d2g, flow, gt, _combine(v, gvalid, gt.shape[:2]), fg)
    if report.flow is None and report.depth is None and report.scene_flow is None:
        raise UsageError("nothing to evaluate: pass --flow/--flow-gt, --depth/--depth-gt or the scene-flow inputs")
    if args.report_out:
        Path(args.report_out).write_text(report.to_json())
    _emit(args, report.to_dict(), report.to_text())
    return 0


def _combine(a, b, shape):
    out = np.ones(shape, dtype=bool)
    for m in (a, b):
        if m is not None:
            out &= np.asarray(m, dtype=bool)
    return out


def cmd_occlusion(args) -> int:
    inputs = _Inputs()
    ff, _ = inputs.load(args.forward, "flow", "--forward")
    fb, _ = inputs.load(args.backward, "flow", "--backward")
    occ = fb_occlusion(ff, fb, OcclusionParams(args.alpha1, args.alpha2, args.flag_consistent), threads=args.threads)
    _out_bundle(args, inputs.rig, {"occ": mask_field(occ)}, {"command": "occlusion"})
    _emit(args, {"occluded_fraction": float(occ.mean())}, f"occluded: {occ.mean():.4f}\n")
    return 0


def cmd_viz(args) -> int:
    inputs = _Inputs()
    given = [x for x in (args.flow, args.disp, args.motion) if x]
    if len(given) != 1:
        raise UsageError("give exactly one of --flow, --disp, --motion")
    meta = {}
    if args.flow:
        flow, valid = inputs.load(args.flow, "flow", "--flow")
        rgb, m = flow_to_rgb(flow, valid, args.max_flow)
        meta["max_flow"] = repr(m)
    elif args.disp:
        d, valid = inputs.load(args.disp, "disparity", "--disp")
        rgb = disparity_to_rgb(d, valid)
    else:
        motion, _ = inputs.load(args.motion, "twist6", "--motion")
        rgb = motion_to_rgb(motion, args.mode)
        meta["pca_mode"] = args.mode
    save_rgb(args.out, rgb, meta)
    _emit(args, {"out": str(args.out), **meta}, f"wrote {args.out}\n")
    return 0


# ---- parser ----------------------------------------------------------------------

def _add_rig(p):
    g = p.add_argument_group("camera rig (else taken from a bundle input)")
    g.add_argument("--rig", help="JSON rig file or calibration text with P2/P3 projection matrices")
    g.add_argument("--fx", type=float, help="horizontal focal length [px]")
    g.add_argument("--fy", type=float, help="vertical focal length [px]")
    g.add_argument("--cx", type=float, help="principal point x [px]")
    g.add_argument("--cy", type=float, help="principal point y [px]")
    g.add_argument("--baseline", type=float, help="stereo baseline [m]")


def _add_common(p, out=True):
    if out:
        p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--json", action="store_true", help="print the structured report as JSON")
    p.add_argument(
        "--threads", type=int, default=default_threads(), help=f"worker threads [count] (env {THREADS_ENV})"
    )
    p.add_argument("--config", help="YAML/JSON file with flag values (keys use underscores)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="rigidflow", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fp = FitterParams()

    p = sub.add_parser("synth", help="render a synthetic oracle scene to a bundle", formatter_class=fmt)
    p.add_argument("spec", nargs="?", help="scene file (YAML)")
    p.add_argument("--preset", choices=PRESETS, help="named scene instead of a file")
    p.add_argument("--height", type=int, default=96, help="preset image height [px]")
    p.add_argument("--width", type=int, default=128, help="preset image width [px]")
    p.add_argument("--seed", type=int, default=0, help="preset seed")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="flow from disparity and a rigid-motion field", formatter_class=fmt)
    p.add_argument("--disp", required=True, help="first-frame disparity reference [px, negative in memory]")
    p.add_argument("--motion", required=True, help="twist field reference [m, rad]")
    p.add_argument("--flow-png", help="also write the flow as a 16-bit PNG")
    _add_rig(p)
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("fit", help="estimate a dense rigid-motion field from flow and depth", formatter_class=fmt)
    p.add_argument("--flow", required=True, help="target flow reference [px]")
    p.add_argument("--depth", help="depth reference [m]")
    p.add_argument("--disp", help="disparity reference instead of depth [px]")
    p.add_argument("--reliable", help="mask of pixels to use")
    p.add_argument("--occ", action="append", help="occlusion mask to exclude (repeatable)")
    p.add_argument("--lambda-smooth", type=float, default=fp.lambda_smooth, help="neighbour weight of the median smoothing [-]")
    p.add_argument("--outer-iters", type=int, default=fp.outer_iters, help="outer iterations [count]")
    p.add_argument("--gn-iters", type=int, default=fp.gn_iters, help="Gauss-Newton steps per outer iteration [count]")
    p.add_argument("--damping", type=float, default=fp.damping, help="initial Levenberg damping [-]")
    p.add_argument("--window-radius", type=int, default=fp.window_radius, help="residual window radius [px]")
    p.add_argument("--convergence-tol", type=float, default=fp.convergence_tol, help="stop when the mean residual changes less [px]")
    p.add_argument("--warm-start", action="store_true", help="initialise from the global rigid fit")
    _add_rig(p)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fuse", help="fuse stage-1 and stage-2 flow by reliability", formatter_class=fmt)
    p.add_argument("--flow-s1", required=True, help="photometric flow reference [px]")
    p.add_argument("--occ-s1", required=True, help="its forward-backward occlusion mask")
    p.add_argument("--flow-s2", required=True, help="reconstructed flow reference [px]")
    p.add_argument("--occ-disp", required=True, help="disparity occlusion mask")
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("refine", help="closed-form disparity refinement", formatter_class=fmt)
    p.add_argument("--d1", required=True, help="first-frame disparity [px]")
    p.add_argument("--d2", required=True, help="second-frame disparity on the second-frame grid [px]")
    p.add_argument("--d2-warped", action="store_true", help="--d2 is already warped to the first frame")
    p.add_argument("--flow", required=True, help="fused flow [px]")
    p.add_argument("--motion", required=True, help="twist field [m, rad]")
    p.add_argument("--occ-flow", help="flow occlusion mask; masks the warped second disparity")
    p.add_argument("--cond-threshold", type=float, default=1e4, help="max singular-value ratio of the 3x2 system [-]")
    p.add_argument("--max-delta", type=float, default=3.0, help="clamp on each correction [px]")
    p.add_argument("--disp-png", help="also write the refined first disparity as PNG")
    _add_rig(p)
    _add_common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("occlusion", help="forward-backward occlusion mask", formatter_class=fmt)
    p.add_argument("--forward", required=True, help="forward flow reference [px]")
    p.add_argument("--backward", required=True, help="backward flow reference [px]")
    p.add_argument("--alpha1", type=float, default=0.01, help="relative threshold [-]")
    p.add_argument("--alpha2", type=float, default=0.5, help="absolute threshold [px^2]")
    p.add_argument(
        "--flag-consistent", action="store_true", help="flag pixels that pass the consistency test instead"
    )
    _add_common(p)
    p.set_defaults(func=cmd_occlusion)

    p = sub.add_parser("eval", help="flow / depth / scene-flow metrics", formatter_class=fmt)
    p.add_argument("--flow", help="predicted flow [px]")
    p.add_argument("--flow-gt", help="ground-truth flow [px]")
    p.add_argument("--occ", help="occlusion mask for the noc/occ split")
    p.add_argument("--fg", help="foreground mask for the bg/fg split")
    p.add_argument("--valid", help="evaluation mask")
    p.add_argument("--depth", help="predicted depth [m]")
    p.add_argument("--depth-gt", help="ground-truth depth [m]")
    p.add_argument("--depth-cap", type=float, default=80.0, help="max ground-truth depth evaluated [m]")
    p.add_argument("--d1", help="predicted first disparity [px]")
    p.add_argument("--d1-gt", help="ground-truth first disparity [px]")
    p.add_argument("--d2", help="predicted second disparity on first-frame pixels [px]")
    p.add_argument("--d2-gt", help="ground truth for --d2 [px]")
    p.add_argument("--report-out", help="write the JSON report here")
    _add_common(p, out=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render flow, disparity or a motion field as PNG", formatter_class=fmt)
    p.add_argument("--flow", help="flow reference [px]")
    p.add_argument("--disp", help="disparity reference [px]")
    p.add_argument("--motion", help="twist field reference")
    p.add_argument("--mode", choices=("joint", "per-channel"), default="joint", help="PCA normalisation")
    p.add_argument("--max-flow", type=float, help="flow magnitude mapped to full saturation [px] (default: max)")
    _add_common(p)
    p.set_defaults(func=cmd_viz)
    return parser


def _apply_config(parser, args, argv) -> None:
    """Fill flags from ``--config`` unless they were given on the command line."""
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"--config: no such file {path}")
    try:
        cfg = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a mapping")
    known = set(vars(args)) - {"func", "command", "config"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    explicit = {a.split("=")[0] for a in argv if a.startswith("--")}
    actions = {a.dest: a for a in _subparser(parser, args.command)._actions}
    for key, value in cfg.items():
        if "--" + key.replace("_", "-") in explicit:
            continue
        action = actions.get(key)
        if action is not None and value is not None:
            if action.type is not None:
                try:
                    value = action.type(value)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"{path}: bad value for {key!r} ({exc})") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{path}: {key!r} must be one of {list(action.choices)}")
        setattr(args, key, value)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            _apply_config(parser, args, argv)
        if args.threads < 1:
            raise ParameterError("--threads must be at least 1")
        return args.func(args)
    except RigidFlowError as exc:
        sys.stderr.write(f"rigidflow {args.command}: {exc}\n")
        return EXIT_CODES[exc.category]


if __name__ == "__main__":
    sys.exit(main())
