"""Dense H x W fields with a semantic tag."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

TAG_CHANNELS = {
    "flow": 2,
    "disparity": 1,
    "depth": 1,
    "twist6": 6,
    "mask": 1,
    "rgb": 3,
    "label": 1,
    "scalar": 1,
}


@dataclass(frozen=True)
class Field:
    """A float64 array of shape (H, W, C) and what it holds.

    Masks are stored as 0/1 floats; disparity fields hold non-positive values
    on valid pixels (invalid pixels may carry 0 or NaN).
    """

    data: np.ndarray
    tag: str

    def __post_init__(self):
        if self.tag not in TAG_CHANNELS:
            raise ParameterError(f"unknown field tag {self.tag!r}")
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3 or a.shape[2] != TAG_CHANNELS[self.tag]:
            raise DimensionError(
                f"{self.tag} field needs {TAG_CHANNELS[self.tag]} channels, got shape {a.shape}"
            )
        if self.tag == "mask" and not np.all((a == 0) | (a == 1)):
            raise ParameterError("mask values must be 0 or 1")
        if self.tag == "disparity" and np.any(a[np.isfinite(a)] > 0):
            raise ParameterError("disparity fields are stored non-positive")
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def array(self) -> np.ndarray:
        """Channel-squeezed view: (H, W) for single-channel fields, else (H, W, C)."""
        return self.data[..., 0] if self.channels == 1 else self.data

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return self.tag == other.tag and np.array_equal(self.data, other.data, equal_nan=True)

    __hash__ = None


def mask_field(m) -> Field:
    return Field(np.asarray(m, dtype=bool).astype(np.float64), "mask")


def check_same_shape(*arrays, names=None) -> tuple[int, int]:
    """Raise DimensionError unless all arrays share their leading (H, W)."""
    shapes = [np.shape(a)[:2] for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(f"{n}={s}" for n, s in zip(names or range(len(shapes)), shapes))
        raise DimensionError(f"shape mismatch: {label}")
    return shapes[0]


def check_channels(a, c: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if c == 1:
        if a.ndim == 3 and a.shape[2] == 1:
            a = a[..., 0]
        if a.ndim != 2:
            raise DimensionError(f"{name} must be (H, W), got {a.shape}")
    elif a.ndim != 3 or a.shape[2] != c:
        raise DimensionError(f"{name} must be (H, W, {c}), got {a.shape}")
    return a
