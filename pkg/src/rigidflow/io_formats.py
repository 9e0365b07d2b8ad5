"""Readers and writers for flow/disparity PNGs, calibration text, rigs and bundles.

Byte-level layouts are described in FORMATS.md. This is the only module
that converts between the positive on-disk disparity convention and the
negative in-memory one.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import cv2
import numpy as np

from .errors import DimensionError, FormatError, IntegrityError, ParameterError, ParseError
from .field import TAG_CHANNELS, Field
from .geometry import CameraRig

FLOW_OFFSET = 2**15
FLOW_SCALE = 64.0
DISP_SCALE = 256.0
BUNDLE_FORMAT = "rigidflow-bundle"
BUNDLE_VERSION = 1
MANIFEST = "manifest.json"


def _read_png16(path, channels: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such file")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable image")
    if img.dtype != np.uint16:
        raise FormatError(f"{path}: expected 16-bit samples, got {img.dtype}")
    got = 1 if img.ndim == 2 else img.shape[2]
    if got != channels:
        raise FormatError(f"{path}: expected {channels} channel(s), got {got}")
    return img


def _write_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img, [cv2.IMWRITE_PNG_COMPRESSION, 6]):
        raise FormatError(f"{path}: could not write image")


def read_flow_png(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a 16-bit flow PNG. Returns ``(flow (H, W, 2), valid (H, W) bool)``.

    Invalid pixels are returned with zero flow.
    """
    img = _read_png16(path, 3)[..., ::-1]  # BGR -> (u, v, valid)
    valid_raw = img[..., 2]
    if np.any(valid_raw > 1):
        raise FormatError(f"{path}: validity channel must be 0 or 1")
    valid = valid_raw == 1
    flow = (img[..., :2].astype(np.float64) - FLOW_OFFSET) / FLOW_SCALE
    return np.where(valid[..., None], flow, 0.0), valid


def encode_flow(flow, valid=None) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {flow.shape}")
    valid = np.all(np.isfinite(flow), axis=-1) if valid is None else np.asarray(valid, dtype=bool)
    enc = np.round(np.where(valid[..., None], flow, 0.0) * FLOW_SCALE) + FLOW_OFFSET
    if np.any((enc < 0) | (enc > 65535)):
        raise FormatError("flow magnitude exceeds the 16-bit PNG range (|flow| < 512 px)")
    out = np.empty(flow.shape[:2] + (3,), dtype=np.uint16)
    out[..., :2] = enc.astype(np.uint16)
    out[..., 2] = valid
    return out


def write_flow_png(path, flow, valid=None) -> None:
    """Write flow (H, W, 2) px with a validity mask (default: finite pixels)."""
    _write_png(path, encode_flow(flow, valid)[..., ::-1])


def read_disparity_png(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a 16-bit disparity PNG into negative disparity and a validity mask."""
    raw = _read_png16(path, 1)
    valid = raw > 0
    return -(raw.astype(np.float64) / DISP_SCALE), valid


def write_disparity_png(path, disparity, valid=None) -> None:
    """Write negative disparity (H, W) as positive 1/256 px steps; 0 marks invalid."""
    d = np.asarray(disparity, dtype=np.float64)
    if d.ndim == 3 and d.shape[2] == 1:
        d = d[..., 0]
    if d.ndim != 2:
        raise FormatError(f"disparity must be (H, W), got {d.shape}")
    if valid is None:
        valid = np.isfinite(d) & (d < 0)
    valid = np.asarray(valid, dtype=bool)
    if np.any(d[valid] > 0):
        raise FormatError("disparity must be negative on valid pixels")
    enc = np.round(-np.where(valid, d, 0.0) * DISP_SCALE)
    if np.any(enc[valid] < 1) or np.any(enc > 65535):
        raise FormatError("disparity outside the representable range (1/256 .. 255.99 px)")
    _write_png(path, enc.astype(np.uint16))


def read_mask_png(path) -> np.ndarray:
    path = Path(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED) if path.is_file() else None
    if img is None:
        raise FormatError(f"{path}: not a readable image")
    if img.ndim != 2:
        raise FormatError(f"{path}: mask must be single channel")
    return img > 0


def write_mask_png(path, mask) -> None:
    _write_png(path, np.asarray(mask, dtype=bool).astype(np.uint8) * 255)


# ---- calibration -------------------------------------------------------------

LEFT_KEYS = ("P_rect_02", "P2")
RIGHT_KEYS = ("P_rect_03", "P3")


def parse_calibration(text: str, source: str = "<calibration>") -> CameraRig:
    """Rig from ``KEY: 12 numbers`` lines holding 3 x 4 projection matrices.

    The left camera is ``P_rect_02`` or ``P2``, the right ``P_rect_03`` or
    ``P3``. The baseline is the difference of their ``P[0, 3]`` entries
    divided by ``-fx``.
    """
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        entries[key.strip()] = (lineno, rest.split())

    def matrix(keys):
        for k in keys:
            if k in entries:
                lineno, vals = entries[k]
                try:
                    m = np.array([float(v) for v in vals])
                except ValueError:
                    raise ParseError(f"{source}:{lineno}: {k} has non-numeric entries") from None
                if m.size != 12:
                    raise ParseError(f"{source}:{lineno}: {k} needs 12 numbers, got {m.size}")
                return m.reshape(3, 4)
        raise ParseError(f"{source}: missing projection matrix {keys[-1]} (or {keys[0]})")

    PL, PR = matrix(LEFT_KEYS), matrix(RIGHT_KEYS)
    fx, fy, cx, cy = PL[0, 0], PL[1, 1], PL[0, 2], PL[1, 2]
    baseline = -(PR[0, 3] - PL[0, 3]) / fx
    if not baseline > 0:
        raise ParseError(f"{source}: derived baseline {baseline} is not positive")
    return CameraRig(fx, fy, cx, cy, baseline)


def read_calibration(path) -> CameraRig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_calibration(text, str(path))


def write_calibration(path, rig: CameraRig) -> None:
    PL = np.array([[rig.fx, 0, rig.cx, 0], [0, rig.fy, rig.cy, 0], [0, 0, 1, 0]], dtype=np.float64)
    PR = PL.copy()
    PR[0, 3] = -rig.fx * rig.baseline
    lines = [f"{k}: " + " ".join(repr(float(v)) for v in P.ravel()) for k, P in (("P2", PL), ("P3", PR))]
    Path(path).write_text("\n".join(lines) + "\n")


def write_rig(path, rig: CameraRig) -> None:
    """The artifact's own rig file: a JSON object with the five rig numbers."""
    Path(path).write_text(json.dumps(rig.to_dict(), indent=2, sort_keys=True) + "\n")


def read_rig(path) -> CameraRig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
        return CameraRig.from_dict(d)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: bad rig file ({exc})") from exc


def load_rig(path) -> CameraRig:
    """Rig from either a JSON rig file or a projection-matrix calibration file."""
    path = Path(path)
    text = path.read_text() if path.is_file() else None
    if text is None:
        raise ParseError(f"{path}: no such file")
    if text.lstrip().startswith("{"):
        return read_rig(path)
    return parse_calibration(text, str(path))


# ---- field files and bundles -------------------------------------------------

def save_field(path, field: Field) -> None:
    """Write a field's (H, W, C) float64 array as .npy (little endian)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(field.data, dtype="<f8"), allow_pickle=False)


def load_npy(path) -> np.ndarray:
    try:
        a = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a readable .npy file ({exc})") from exc
    if a.dtype.kind != "f" and a.dtype.kind not in "iub":
        raise FormatError(f"{path}: unsupported dtype {a.dtype}")
    return a.astype(np.float64)


def write_bundle(path, bundle) -> None:
    """Write a bundle directory: ``manifest.json`` plus one ``<name>.npy`` per field.

    Output bytes depend only on the bundle contents.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(bundle.fields):
        f = bundle.fields[name]
        fname = f"{name}.npy"
        save_field(root / fname, f)
        H, W = f.shape
        entries.append(
            {"name": name, "tag": f.tag, "height": H, "width": W, "channels": f.channels, "encoding": "npy-f8-le", "file": fname}
        )
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "rig": bundle.rig.to_dict() if bundle.rig is not None else None,
        "meta": bundle.meta,
        "fields": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_bundle(path):
    """Read a bundle directory, checking every payload against the manifest.

    Raises:
        IntegrityError: manifest missing/inconsistent or a payload disagrees.
    """
    from .synth import SceneBundle

    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except OSError as exc:
        raise IntegrityError(f"{root}: cannot read {MANIFEST} ({exc})") from exc
    except ValueError as exc:
        raise IntegrityError(f"{root}: malformed {MANIFEST} ({exc})") from exc
    if manifest.get("format") != BUNDLE_FORMAT or manifest.get("version") != BUNDLE_VERSION:
        raise IntegrityError(f"{root}: not a {BUNDLE_FORMAT} v{BUNDLE_VERSION} manifest")
    rig = CameraRig.from_dict(manifest["rig"]) if manifest.get("rig") else None
    fields = {}
    for e in manifest.get("fields", []):
        try:
            name, tag, H, W, C = e["name"], e["tag"], e["height"], e["width"], e["channels"]
            fname = e["file"]
        except KeyError as exc:
            raise IntegrityError(f"{root}: field entry missing {exc}") from None
        if tag not in TAG_CHANNELS or TAG_CHANNELS[tag] != C:
            raise IntegrityError(f"{root}: field {name!r} has inconsistent tag/channels {tag}/{C}")
        if os.sep in fname or fname.startswith(".."):
            raise IntegrityError(f"{root}: field {name!r} points outside the bundle")
        try:
            a = np.load(root / fname, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise IntegrityError(f"{root}: payload of {name!r} unreadable ({exc})") from exc
        if a.shape != (H, W, C):
            raise IntegrityError(f"{root}: field {name!r} manifest shape {(H, W, C)} but payload {a.shape}")
        try:
            fields[name] = Field(a, tag)
        except (ParameterError, DimensionError) as exc:
            raise IntegrityError(f"{root}: field {name!r} violates its tag ({exc})") from exc
    return SceneBundle(rig=rig, fields=fields, meta=manifest.get("meta", {}))
