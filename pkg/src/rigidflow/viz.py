"""Colour renderings of flow, disparity and motion fields as 8-bit PNGs."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .motion_field import pca_visualize


def colorwheel() -> np.ndarray:
    """The usual 55-entry optical-flow hue wheel (RY, YG, GC, CB, BM, MR), 0..255."""
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append(np.floor(np.asarray(a) + (np.asarray(b) - np.asarray(a)) * t))
    return np.concatenate(rows, axis=0)


def flow_to_rgb(flow, valid=None, max_mag: float | None = None) -> tuple[np.ndarray, float]:
    """Colour-code flow by direction (hue) and magnitude (saturation).

    Magnitudes are divided by ``max_mag`` (default: the largest valid
    magnitude). Returns ``(rgb uint8 (H, W, 3), max_mag)``; invalid pixels
    are black.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if valid is None:
        valid = np.all(np.isfinite(flow), axis=-1)
    u = np.where(valid, flow[..., 0], 0.0)
    v = np.where(valid, flow[..., 1], 0.0)
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag[valid].max()) if valid.any() else 0.0
    scale = max_mag if max_mag > 0 else 1.0
    u, v, mag = u / scale, v / scale, np.minimum(mag / scale, 1.0)
    wheel = colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    col = 1 - mag[..., None] * (1 - col)
    rgb = np.floor(255 * col).astype(np.uint8)
    rgb[~valid] = 0
    return rgb, max_mag


def disparity_to_rgb(disp, valid=None) -> np.ndarray:
    from matplotlib import colormaps

    d = np.abs(np.asarray(disp, dtype=np.float64))
    if valid is None:
        valid = np.isfinite(d) & (d > 0)
    hi = float(d[valid].max()) if valid.any() else 1.0
    rgb = (colormaps["magma"](np.where(valid, d / hi, 0.0))[..., :3] * 255).astype(np.uint8)
    rgb[~valid] = 0
    return rgb


def motion_to_rgb(motion, mode: str = "joint", valid=None) -> np.ndarray:
    return np.round(pca_visualize(motion, mode, valid) * 255).astype(np.uint8)


def save_rgb(path, rgb: np.ndarray, text: dict | None = None) -> None:
    """Write an 8-bit RGB PNG, with optional tEXt metadata entries."""
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, str(v))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path, pnginfo=info)
