"""Per-frame densification and flicker suppression.

Four steps per unit and frame: the sparse camera-space depth arrives from
capture, motion is detected by differencing against the previous color
frame, the motion mask is closed once, and static pixels missing a return
are filled from the two most recent fused frames.
"""

from __future__ import annotations

import re
from collections import deque
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .capture import INVALID_DEPTH, RgbdFrame
from .errors import DimensionMismatchError, InvalidInputError

DEFAULT_TAU = 25
HISTORY = 2


def default_radius(width: int) -> int:
    """Closing radius 2 at 320 px, scaled with raster width."""
    return max(1, int(round(2 * width / 320)))


def motion_mask(prev_rgb: np.ndarray, cur_rgb: np.ndarray, tau: int = DEFAULT_TAU) -> np.ndarray:
    """True where the largest per-channel absolute difference exceeds ``tau``."""
    if prev_rgb.shape != cur_rgb.shape:
        raise DimensionMismatchError(f"{prev_rgb.shape} vs {cur_rgb.shape}")
    if not 0 <= tau <= 255:
        raise InvalidInputError("tau must lie in [0, 255]")
    a = np.asarray(prev_rgb, dtype=np.uint8)
    b = np.asarray(cur_rgb, dtype=np.uint8)
    diff = np.maximum(a, b) - np.minimum(a, b)  # |b - a| without widening
    if diff.ndim == 3:
        m = diff[..., 0]
        for ch in range(1, diff.shape[2]):
            m = np.maximum(m, diff[..., ch])
        diff = m
    return diff > tau


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    return ndimage.maximum_filter(mask, size=size, mode="constant", cval=0)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    # Outside the raster counts as set, so closing never eats border pixels.
    size = 2 * radius + 1
    return ndimage.minimum_filter(mask, size=size, mode="constant", cval=1)


def close_mask(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """Morphological closing with a (2r+1)-square structuring element."""
    if radius < 1:
        raise InvalidInputError("closing radius must be >= 1")
    return erode(dilate(mask, radius), radius)


class DensifyState:
    """The two most recent fused depth rasters of one unit and their masks."""

    def __init__(self):
        self.entries: deque = deque(maxlen=HISTORY)  # (seq, depth, mask), oldest first

    def __len__(self):
        return len(self.entries)

    def push(self, seq: int, depth: np.ndarray, mask: np.ndarray) -> None:
        if self.entries and seq <= self.entries[-1][0]:
            raise InvalidInputError("history must be pushed in increasing seq order")
        self.entries.append((seq, depth, mask))

    def newest_first(self):
        return reversed(self.entries)


def _valid(depth):
    # uint16 wrap-around maps both 0 and INVALID_DEPTH above the bound
    return (depth - np.uint16(1)) < np.uint16(INVALID_DEPTH - 1)


def fuse_static(cur: RgbdFrame, state: DensifyState, cur_mask: np.ndarray) -> RgbdFrame:
    """Fill invalid static pixels from history, newest entry first.

    A history pixel is used only if it is valid, was static in its own frame
    and is static in ``cur_mask``. Valid current pixels are never touched.
    The fused result is pushed into ``state``.
    """
    if cur_mask.shape != cur.depth.shape:
        raise DimensionMismatchError("mask does not match frame")
    depth = cur.depth.copy()
    hole = ~_valid(depth) & ~cur_mask
    for _, hist_depth, hist_mask in state.newest_first():
        if hist_depth.shape != depth.shape:
            raise DimensionMismatchError("history raster does not match frame")
        take = hole & _valid(hist_depth) & ~hist_mask
        np.copyto(depth, hist_depth, where=take)
        hole &= ~take
    state.push(cur.seq, depth, cur_mask)
    return cur.replace(depth=depth)


class Densifier:
    """Owns the per-unit state: previous color frame plus depth history."""

    def __init__(self, tau: int = DEFAULT_TAU, radius: Optional[int] = None, guard: bool = True):
        self.tau = tau
        self.radius = radius
        self.guard = guard
        self.state = DensifyState()
        self._prev_rgb: Optional[np.ndarray] = None
        self.last_mask: Optional[np.ndarray] = None

    def process(self, frame: RgbdFrame) -> RgbdFrame:
        r = self.radius or default_radius(frame.depth.shape[1])
        if self._prev_rgb is None:
            mask = np.zeros(frame.depth.shape, dtype=bool)
        else:
            mask = close_mask(motion_mask(self._prev_rgb, frame.rgb, self.tau), r)
        self.last_mask = mask
        # Guard band keeps history out of the r-neighbourhood of moving regions.
        # One extra ring absorbs single missed pixels on the object outline,
        # which closing cannot restore.
        exclusion = dilate(mask, r + 1) if self.guard and mask.any() else mask
        self._prev_rgb = frame.rgb
        return fuse_static(frame, self.state, exclusion)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM; 8-bit for bool/uint8 input, 16-bit big-endian otherwise."""
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    else:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise InvalidInputError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=m.end())
    return img.reshape(h, w).astype(np.uint8 if maxval < 256 else np.uint16)
