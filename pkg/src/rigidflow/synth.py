"""Piecewise-rigid synthetic scenes with analytic ground truth.

Scenes are made of infinite planes, finite rectangles ("billboards") and
oriented boxes, each with a pose in first-frame camera coordinates and an
optional rigid motion. Every quantity the pipeline produces is computed
analytically by ray casting, so the bundle can serve as a test oracle.

Motion conventions (all in first-frame left-camera coordinates):

* ``camera_motion`` maps a static point's first-frame camera coordinates to
  its second-frame camera coordinates.
* an object's ``motion`` moves its points within the first-frame coordinates;
  the per-pixel rigid motion is ``camera_motion o object.motion``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import ParameterError, SpecError
from .field import Field, mask_field
from .geometry import CameraRig, pixel_grid, project_unchecked
from .se3 import RigidMotion, apply_batch

SHAPES = ("ground-plane", "box", "billboard")
OCCLUSION_MARGIN = 0.01


@dataclass(frozen=True)
class SceneObject:
    """One rigid surface.

    Attributes:
        shape: ``ground-plane`` (infinite local plane y = 0), ``billboard``
            (rectangle in the local z = 0 plane, ``size[:2]`` = width, height)
            or ``box`` (``size`` = full extents along local x, y, z).
        pose: twist of the object-to-camera transform, meters / radians.
        size: extents in meters.
        motion: twist of the object's rigid motion between the frames.
    """

    shape: str
    pose: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    size: tuple = (1.0, 1.0, 1.0)
    motion: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        for name, n in (("pose", 6), ("size", 3), ("motion", 6)):
            value = tuple(float(v) for v in getattr(self, name))
            if self.shape == "billboard" and name == "size" and len(value) == 2:
                value = value + (0.0,)
            if len(value) != n or not np.all(np.isfinite(value)):
                raise SpecError(f"{self.shape} {name} needs {n} finite numbers")
            object.__setattr__(self, name, value)
        if self.shape != "ground-plane" and min(self.size[:2]) <= 0:
            raise SpecError(f"{self.shape} size must be positive")

    @property
    def is_dynamic(self) -> bool:
        return any(v != 0 for v in self.motion)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    rig: CameraRig
    camera_motion: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    objects: tuple = ()
    seed: int = 0
    flow_sigma: float = 0.0
    disp_sigma: float = 0.0
    z_min: float = 0.5
    z_max: float = 80.0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise SpecError("image must be at least 2 x 2")
        if not 0 < self.z_min < self.z_max:
            raise SpecError("need 0 < z_min < z_max")
        if self.flow_sigma < 0 or self.disp_sigma < 0:
            raise SpecError("noise levels must be non-negative")
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "camera_motion", tuple(float(v) for v in self.camera_motion))


@dataclass
class SceneBundle:
    """Named fields plus the rig and free-form metadata.

    Ground-truth keys produced by :func:`generate`: ``depth1``, ``disp1``,
    ``depth2``, ``disp2`` (second-frame grid), ``flow_gt``, ``flow_bw_gt``
    (second-frame grid), ``motion_gt``, ``occ_flow_gt``, ``occ_disp_gt``,
    ``object_id``, ``fg``, ``valid1``, ``valid2``.
    """

    rig: CameraRig
    fields: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.fields[key].array()

    def __contains__(self, key: str) -> bool:
        return key in self.fields

    def mask(self, key: str) -> np.ndarray:
        return self[key].astype(bool)

    def __eq__(self, other):
        if not isinstance(other, SceneBundle):
            return NotImplemented
        return (
            self.rig == other.rig
            and self.meta == other.meta
            and self.fields.keys() == other.fields.keys()
            and all(self.fields[k] == other.fields[k] for k in self.fields)
        )


def _object_in_frame(obj: SceneObject, frame: RigidMotion) -> RigidMotion:
    return frame @ RigidMotion.exp(obj.pose)


def _intersect(obj: SceneObject, pose: RigidMotion, dirs: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Ray parameter of the first hit (inf for a miss). Rays are ``origin + s * dirs``."""
    Rt = pose.R.T
    o = Rt @ (origin - pose.t)
    d = dirs @ pose.R
    with np.errstate(divide="ignore", invalid="ignore"):
        if obj.shape == "ground-plane":
            s = -o[1] / d[..., 1]
            return np.where(np.isfinite(s) & (s > 0), s, np.inf)
        if obj.shape == "billboard":
            s = -o[2] / d[..., 2]
            p = o + s[..., None] * d
            hit = (
                np.isfinite(s)
                & (s > 0)
                & (np.abs(p[..., 0]) <= obj.size[0] / 2)
                & (np.abs(p[..., 1]) <= obj.size[1] / 2)
            )
            return np.where(hit, s, np.inf)
        half = np.asarray(obj.size) / 2
        t1 = (-half - o) / d
        t2 = (half - o) / d
        lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
        inside_slab = np.abs(o) <= half
        parallel = d == 0
        lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
        near = lo.max(axis=-1)
        far = hi.min(axis=-1)
        hit = (near <= far) & (near > 0)
        return np.where(hit, near, np.inf)


def raycast(objects, poses, rig: CameraRig, xs, ys, z_range, origin=(0.0, 0.0, 0.0)):
    """Closest surface along each pixel ray of a camera at ``origin``.

    Depth is measured along the camera z axis. Returns ``(depth, ids)`` with
    ``inf`` / ``-1`` where nothing within ``z_range`` is hit.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.stack(
        np.broadcast_arrays((xs - rig.cx) / rig.fx, (ys - rig.cy) / rig.fy, np.ones_like(xs)), axis=-1
    )
    depth = np.full(np.shape(xs), np.inf)
    ids = np.full(np.shape(xs), -1, dtype=np.int64)
    for k, (obj, pose) in enumerate(zip(objects, poses)):
        s = _intersect(obj, pose, dirs, origin)
        s = np.where((s >= z_range[0]) & (s <= z_range[1]), s, np.inf)
        closer = s < depth
        depth = np.where(closer, s, depth)
        ids = np.where(closer, k, ids)
    return depth, ids


def object_motions(spec: SceneSpec) -> list[RigidMotion]:
    """Per-object rigid motion between the frames in camera coordinates."""
    cam = RigidMotion.exp(spec.camera_motion)
    return [cam @ RigidMotion.exp(o.motion) for o in spec.objects]


def generate(spec: SceneSpec) -> SceneBundle:
    """Render the ground-truth bundle of a scene.

    Pixels with no surface are invalid in every field (zero values, False
    masks, object id -1). Raises SpecError if more than half of the first
    frame is empty.
    """
    H, W = spec.height, spec.width
    rig = spec.rig
    if not spec.objects:
        raise SpecError("scene has no objects")
    xs, ys = pixel_grid(H, W)
    zr = (spec.z_min, spec.z_max)
    identity = RigidMotion.identity()
    cam = RigidMotion.exp(spec.camera_motion)
    motions = object_motions(spec)
    poses1 = [_object_in_frame(o, identity) for o in spec.objects]
    poses2 = [m @ p for m, p in zip(motions, poses1)]

    z1, id1 = raycast(spec.objects, poses1, rig, xs, ys, zr)
    valid1 = np.isfinite(z1)
    if valid1.mean() < 0.5:
        raise SpecError(f"{100 * (1 - valid1.mean()):.1f}% of pixels see no surface")
    z1 = np.where(valid1, z1, 0.0)

    twists = np.stack([m.log() for m in motions])
    Rs = np.stack([m.R for m in motions])
    ts = np.stack([m.t for m in motions])
    sel = np.where(valid1, id1, 0)
    motion_gt = np.where(valid1[..., None], twists[sel], 0.0)

    P1 = np.stack([z1 * (xs - rig.cx) / rig.fx, z1 * (ys - rig.cy) / rig.fy, z1], axis=-1)
    P2 = apply_batch(Rs[sel], ts[sel], P1)
    uv2, zp = project_unchecked(P2, rig)
    ahead = valid1 & (zp > 0)
    flow = np.where(ahead[..., None], uv2 - np.stack([xs, ys], axis=-1), 0.0)

    # forward occlusion: transported point leaves the frame or is hidden in frame 2
    u2, v2 = uv2[..., 0], uv2[..., 1]
    in_frame = ahead & (u2 >= 0) & (u2 <= W - 1) & (v2 >= 0) & (v2 <= H - 1)
    zhit, _ = raycast(
        spec.objects, poses2, rig, np.where(in_frame, u2, 0.0), np.where(in_frame, v2, 0.0), (0.0, np.inf)
    )
    hidden = zhit < zp - OCCLUSION_MARGIN
    occ_flow = valid1 & (~in_frame | hidden)

    # second frame on its own grid
    z2, id2 = raycast(spec.objects, poses2, rig, xs, ys, zr)
    valid2 = np.isfinite(z2)
    z2 = np.where(valid2, z2, 0.0)
    sel2 = np.where(valid2, id2, 0)
    Q2 = np.stack([z2 * (xs - rig.cx) / rig.fx, z2 * (ys - rig.cy) / rig.fy, z2], axis=-1)
    Rinv = np.swapaxes(Rs, 1, 2)
    tinv = -np.einsum("kij,kj->ki", Rinv, ts)
    Q1 = apply_batch(Rinv[sel2], tinv[sel2], Q2)
    uv1, zb = project_unchecked(Q1, rig)
    back_ok = valid2 & (zb > 0)
    flow_bw = np.where(back_ok[..., None], uv1 - np.stack([xs, ys], axis=-1), 0.0)

    # stereo occlusion: left point hidden from (or outside) the right camera
    with np.errstate(divide="ignore"):
        xr = np.where(valid1, xs - rig.fxb / np.where(valid1, z1, 1.0), -1.0)
    right_in = valid1 & (xr >= 0) & (xr <= W - 1)
    zr_hit, _ = raycast(
        spec.objects, poses1, rig, np.where(right_in, xr, 0.0), ys, (0.0, np.inf), origin=(rig.baseline, 0, 0)
    )
    occ_disp = valid1 & (~right_in | (zr_hit < z1 - OCCLUSION_MARGIN))

    def disp(z, ok):
        return np.where(ok, -rig.fxb / np.where(ok, z, 1.0), 0.0)

    dynamic = np.array([o.is_dynamic for o in spec.objects])
    fg = valid1 & dynamic[sel]
    fields = {
        "depth1": Field(z1, "depth"),
        "disp1": Field(disp(z1, valid1), "disparity"),
        "depth2": Field(z2, "depth"),
        "disp2": Field(disp(z2, valid2), "disparity"),
        "flow_gt": Field(flow, "flow"),
        "flow_bw_gt": Field(flow_bw, "flow"),
        "motion_gt": Field(motion_gt, "twist6"),
        "occ_flow_gt": mask_field(occ_flow),
        "occ_disp_gt": mask_field(occ_disp),
        "object_id": Field(np.where(valid1, id1, -1).astype(np.float64), "label"),
        "fg": mask_field(fg),
        "valid1": mask_field(ahead),
        "valid2": mask_field(back_ok),
    }
    meta = {"seed": int(spec.seed), "objects": len(spec.objects)}
    return SceneBundle(rig=rig, fields=fields, meta=meta)


def perturb(bundle: SceneBundle, flow_sigma: float, disp_sigma: float, seed: int) -> SceneBundle:
    """Copy of ``bundle`` with noisy observations added next to the ground truth.

    Adds ``flow_obs``, ``disp1_obs``, ``disp2_obs`` and the exact noise that
    was added (``flow_noise``, ``disp1_noise``, ``disp2_noise``). Noise is
    i.i.d. Gaussian on valid pixels only. A disparity pushed to zero or
    above becomes invalid (0) and its recorded noise is 0.
    """
    if flow_sigma < 0 or disp_sigma < 0:
        raise ParameterError("noise standard deviations must be non-negative")
    rng = np.random.default_rng(seed)
    fields = dict(bundle.fields)
    v1 = bundle.mask("valid1")
    flow_noise = rng.normal(0.0, 1.0, bundle["flow_gt"].shape) * flow_sigma * v1[..., None]
    fields["flow_obs"] = Field(bundle["flow_gt"] + flow_noise, "flow")
    fields["flow_noise"] = Field(flow_noise, "flow")
    for key in ("disp1", "disp2"):
        gt = bundle[key]
        ok = gt < 0
        noise = rng.normal(0.0, 1.0, gt.shape) * disp_sigma * ok
        obs = gt + noise
        crossed = ok & (obs >= 0)
        obs = np.where(crossed, 0.0, obs)
        noise = np.where(crossed, 0.0, noise)
        fields[f"{key}_obs"] = Field(obs, "disparity")
        fields[f"{key}_noise"] = Field(noise, "scalar")
    meta = dict(bundle.meta, noise_seed=int(seed), flow_sigma=float(flow_sigma), disp_sigma=float(disp_sigma))
    return replace(bundle, fields=fields, meta=meta)


def foreground(bundle: SceneBundle) -> np.ndarray:
    return bundle.mask("fg")


def motion_boundary_distance(object_id: np.ndarray) -> np.ndarray:
    """Chebyshev distance (px) from each pixel to the nearest pixel with another label."""
    from scipy import ndimage

    labels = np.asarray(object_id)
    dist = np.full(labels.shape, np.inf)
    for lab in np.unique(labels):
        inside = labels == lab
        if inside.all():  # no other label anywhere
            break
        d = ndimage.distance_transform_cdt(inside, metric="chessboard").astype(np.float64)
        dist = np.where(inside, d, dist)
    return dist


# ---- presets -------------------------------------------------------------

def default_rig(height: int, width: int) -> CameraRig:
    f = 0.8 * width
    return CameraRig(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, baseline=0.54)


def _background() -> list[SceneObject]:
    return [
        SceneObject("ground-plane", pose=(0, 1.6, 0, 0, 0, 0)),
        SceneObject("billboard", pose=(0, -2.0, 24.0, 0, 0, 0), size=(80.0, 40.0)),
    ]


PRESETS = ("static", "camera-translation", "camera-motion", "moving-box", "three-bodies")


def preset(name: str, height: int = 96, width: int = 128, seed: int = 0) -> SceneSpec:
    """Named oracle scenes used by the tests and the CLI."""
    rig = default_rig(height, width)
    bg = _background()
    box = SceneObject("box", pose=(-1.2, 0.4, 7.0, 0, 0.3, 0), size=(2.0, 2.4, 2.0))
    if name == "static":
        return SceneSpec(height, width, rig, objects=bg + [box], seed=seed)
    if name == "camera-translation":
        return SceneSpec(height, width, rig, camera_motion=(0.15, 0.02, -0.6, 0, 0, 0), objects=bg + [box], seed=seed)
    if name == "camera-motion":
        return SceneSpec(
            height, width, rig, camera_motion=(0.1, -0.03, -0.5, 0.01, -0.03, 0.005), objects=bg + [box], seed=seed
        )
    if name == "moving-box":
        mover = replace(box, pose=(-0.6, 0.2, 6.0, 0, 0.3, 0), size=(2.6, 2.8, 2.0), motion=(0.7, 0.0, -0.3, 0, 0.06, 0))
        return SceneSpec(height, width, rig, camera_motion=(0.05, 0.0, -0.4, 0, 0.01, 0), objects=bg + [mover], seed=seed)
    if name == "three-bodies":
        a = replace(box, pose=(-2.2, 0.3, 8.0, 0, 0.2, 0), size=(2.0, 2.6, 2.0), motion=(0.5, 0.0, 0.0, 0, 0.05, 0))
        b = SceneObject("billboard", pose=(2.0, -0.2, 6.0, 0, -0.2, 0), size=(1.8, 2.4), motion=(-0.3, 0.05, -0.4, 0.02, 0, 0.03))
        return SceneSpec(height, width, rig, camera_motion=(0.05, 0.0, -0.3, 0, 0, 0), objects=bg + [a, b], seed=seed)
    raise SpecError(f"unknown preset {name!r}; choose from {PRESETS}")


# ---- text configuration ----------------------------------------------------

def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "height": spec.height,
        "width": spec.width,
        "rig": spec.rig.to_dict(),
        "camera_motion": list(spec.camera_motion),
        "objects": [
            {"shape": o.shape, "pose": list(o.pose), "size": list(o.size), "motion": list(o.motion)}
            for o in spec.objects
        ],
        "seed": spec.seed,
        "noise": {"flow_sigma": spec.flow_sigma, "disp_sigma": spec.disp_sigma},
        "z_range": [spec.z_min, spec.z_max],
    }


_SPEC_KEYS = {"height", "width", "rig", "camera_motion", "objects", "seed", "noise", "z_range", "preset"}


def spec_from_dict(d: dict) -> SceneSpec:
    """Build a SceneSpec from parsed configuration.

    ``preset: <name>`` starts from a named scene; other keys override it.
    """
    if not isinstance(d, dict):
        raise SpecError("scene configuration must be a mapping")
    unknown = set(d) - _SPEC_KEYS
    if unknown:
        raise SpecError(f"unknown scene keys: {sorted(unknown)}")
    try:
        if "preset" in d:
            base = preset(d["preset"], int(d.get("height", 96)), int(d.get("width", 128)), int(d.get("seed", 0)))
        else:
            for key in ("height", "width", "objects"):
                if key not in d:
                    raise SpecError(f"scene configuration is missing {key!r}")
            base = None
        height = int(d.get("height", base.height if base else 0))
        width = int(d.get("width", base.width if base else 0))
        rig = CameraRig.from_dict(d["rig"]) if "rig" in d else (base.rig if base else default_rig(height, width))
        objects = (
            [SceneObject(**o) for o in d["objects"]] if "objects" in d else list(base.objects)
        )
        noise = d.get("noise", {})
        z = d.get("z_range", [base.z_min, base.z_max] if base else [0.5, 80.0])
        return SceneSpec(
            height=height,
            width=width,
            rig=rig,
            camera_motion=tuple(d.get("camera_motion", base.camera_motion if base else (0,) * 6)),
            objects=objects,
            seed=int(d.get("seed", 0)),
            flow_sigma=float(noise.get("flow_sigma", 0.0)),
            disp_sigma=float(noise.get("disp_sigma", 0.0)),
            z_min=float(z[0]),
            z_max=float(z[1]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"bad scene configuration: {exc}") from exc


def load_spec(path) -> SceneSpec:
    text = Path(path).read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: {exc}") from exc
    return spec_from_dict(d)


def dump_spec(spec: SceneSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(spec_to_dict(spec), sort_keys=False))
