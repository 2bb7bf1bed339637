"""Volume containers, HU windowing, mini-volume extraction and masking.

Arrays are stored as ``(depth, height, width)`` in C order, which makes the
x index the fastest-varying one in the flat buffer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataIntegrityError, ShapeError

MINI_DEPTH = 7


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    is_mask: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {arr.shape}")
        if self.is_mask:
            if not np.isin(arr, (0, 1)).all():
                raise DataIntegrityError("mask values must be in {0, 1}")
            arr = arr.astype(np.uint8, copy=False)
        else:
            arr = arr.astype(np.float32, copy=False)
            if not np.isfinite(arr).all():
                raise DataIntegrityError("volume contains non-finite voxels")
        if arr.flags.writeable or not arr.flags.c_contiguous:
            # never freeze a buffer the caller still holds
            arr = np.array(arr, order="C", copy=True)
            arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        """(width, height, depth) in voxels."""
        d, h, w = self.data.shape
        return (w, h, d)

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def mask(cls, data, spacing=(1.0, 1.0, 1.0)):
        return cls(np.asarray(data).astype(np.uint8), spacing, is_mask=True)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.is_mask == other.is_mask and self.spacing == other.spacing
                and self.data.shape == other.data.shape
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class MiniVolume:
    volume: Volume
    center_slice: int
    parent_depth: int = field(default=None)

    def __post_init__(self):
        if self.volume.data.shape[0] != MINI_DEPTH:
            raise ShapeError(f"mini-volume depth must be {MINI_DEPTH}, got {self.volume.data.shape[0]}")
        parent = self.parent_depth
        if parent is not None and not 0 <= self.center_slice < parent:
            raise IndexError(f"center slice {self.center_slice} outside [0, {parent})")

    @property
    def data(self):
        return self.volume.data


def _as_array(vol):
    return vol.data if isinstance(vol, Volume) else np.asarray(vol)


def hu_window(vol, center=100.0, width=400.0):
    """Map HU values linearly onto [0, 1], clamping outside the window."""
    if not width > 0:
        raise ValueError("window width must be positive")
    hu = _as_array(vol).astype(np.float64)
    if not np.isfinite(hu).all():
        raise DataIntegrityError("non-finite HU voxel")
    out = np.clip((hu - (center - width / 2.0)) / width, 0.0, 1.0).astype(np.float32)
    spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    return Volume(out, spacing)


def minivolume_slices(depth, center_slice, size=MINI_DEPTH):
    """Study slice indices feeding a mini-volume, edge-replicated at the ends."""
    if not 0 <= center_slice < depth:
        raise IndexError(f"center slice {center_slice} outside [0, {depth})")
    half = size // 2
    return np.clip(np.arange(center_slice - half, center_slice + half + 1), 0, depth - 1)


def extract_minivolume(study, center_slice, depth=MINI_DEPTH):
    arr = _as_array(study)
    idx = minivolume_slices(arr.shape[0], center_slice, depth)
    spacing = study.spacing if isinstance(study, Volume) else (1.0, 1.0, 1.0)
    vol = Volume(arr[idx], spacing, is_mask=getattr(study, "is_mask", False))
    return MiniVolume(vol, int(center_slice), arr.shape[0])


def apply_mask(vol, seg):
    """Zero the voxels selected by a binary segmentation."""
    a, s = _as_array(vol), _as_array(seg)
    if a.shape != s.shape:
        raise ShapeError(f"mask shape {s.shape} does not match volume {a.shape}")
    if isinstance(seg, Volume) and not seg.is_mask and not np.isin(s, (0, 1)).all():
        raise DataIntegrityError("segmentation must be binary")
    out = np.where(s.astype(bool), np.float32(0), a).astype(np.float32)
    spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    return Volume(out, spacing)
