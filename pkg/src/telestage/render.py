"""Multi-unit point fusion with a view-dependent depth bias.

Every valid depth pixel of every unit is back-projected to world space and
splatted (1 px) into the virtual camera. Per output pixel the candidate with
the smallest ``z - s * (v . i)`` wins, where ``v`` is the virtual ray through
that pixel and ``i`` the contributing unit's optical axis. The output keeps
the winner's unbiased depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import kernels
from .capture import RgbdFrame
from .errors import ConfigError, InvalidInputError
from .geometry import Intrinsics, Pose, UnitCalibration, pixel_rays

UNIT_TOL = 1e-6
DEFAULT_BIAS_SCALE = 0.05


@dataclass(frozen=True)
class BiasConfig:
    s: float = DEFAULT_BIAS_SCALE  # meters

    def __post_init__(self):
        if not self.s >= 0:
            raise ConfigError("bias scale must be non-negative")


@dataclass(frozen=True, eq=False)
class VirtualCamera:
    intrinsics: Intrinsics
    pose: Pose

    @cached_property
    def _rays(self) -> np.ndarray:
        r = pixel_rays(self.intrinsics)
        r /= np.linalg.norm(r, axis=-1, keepdims=True)
        r = r @ self.pose.rotation.T
        r.setflags(write=False)
        return r

    def rays(self) -> np.ndarray:
        """Unit world-frame ray per pixel, shape (H, W, 3)."""
        return self._rays

    def alignment(self, axis) -> np.ndarray:
        """``v . i`` per pixel for a unit optical axis ``i``, shape (H, W)."""
        return self._rays @ np.asarray(axis, dtype=np.float64)

    @classmethod
    def from_calibration(cls, cal: UnitCalibration) -> "VirtualCamera":
        return cls(cal.intrinsics, cal.pose)


@dataclass(eq=False)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64 meters, 0 where empty
    source_id: np.ndarray  # (H, W) int16, -1 where empty
    coverage: np.ndarray = field(repr=False, default=None)  # (H, W) uint64 unit bitmask
    xyz: np.ndarray = field(repr=False, default=None)  # (H, W, 3) world coords of winners

    @property
    def valid(self) -> np.ndarray:
        return self.source_id >= 0

    def depth_mm(self) -> np.ndarray:
        return np.clip(np.rint(self.depth * 1000.0), 0, 65534).astype(np.uint16)


class ZBuffer:
    """Flat per-pixel state shared by the splat kernels."""

    def __init__(self, n_pixels: int):
        self.key = np.full(n_pixels, np.inf)
        self.depth = np.zeros(n_pixels)
        self.unit = np.full(n_pixels, -1, dtype=np.int16)
        self.rgb = np.zeros((n_pixels, 3), dtype=np.uint8)
        self.xyz = np.zeros((n_pixels, 3))
        self.coverage = np.zeros(n_pixels, dtype=np.uint64)
        self.world = None  # 3x4 source-to-world transform of the unit being splatted


def depth_bias(v, i, s: float) -> float:
    v = np.asarray(v, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    for name, vec in (("v", v), ("i", i)):
        if abs(np.linalg.norm(vec) - 1.0) > UNIT_TOL:
            raise InvalidInputError(f"{name} is not a unit vector")
    if s < 0:
        raise InvalidInputError("bias scale must be non-negative")
    return float(s * np.dot(v, i))


def _as_3x4(pose: Pose) -> np.ndarray:
    return np.hstack([pose.rotation, pose.translation[:, None]])


def fuse_render(frames: Sequence[RgbdFrame], cals: Sequence[UnitCalibration],
                cam: VirtualCamera, cfg: BiasConfig = BiasConfig()) -> RenderOutput:
    """Splat all units into ``cam`` and resolve each pixel by the biased z-test.

    Ties on the biased key go to the lower unit id, then to the earlier
    source pixel in raster order.
    """
    if not frames:
        raise InvalidInputError("need at least one unit frame")
    by_id = {c.unit_id: c for c in cals}
    k = cam.intrinsics
    buf = ZBuffer(k.width * k.height)
    to_cam = cam.pose.inverse()
    dst_k = (k.fx, k.fy, k.cx, k.cy)
    for fr in frames:
        cal = by_id.get(fr.unit_id)
        if cal is None:
            raise InvalidInputError(f"no calibration for unit {fr.unit_id}")
        if not 0 <= fr.unit_id < 64:
            raise InvalidInputError("unit ids must lie in 0..63")
        if fr.depth.shape != (cal.intrinsics.height, cal.intrinsics.width):
            raise InvalidInputError(f"unit {fr.unit_id} frame does not match its intrinsics")
        ki = cal.intrinsics
        buf.world = _as_3x4(cal.pose)
        dot = cam.alignment(cal.optical_axis) if cfg.s else np.zeros((k.height, k.width))
        kernels.splat_unit(fr.depth, fr.rgb, fr.unit_id, (ki.fx, ki.fy, ki.cx, ki.cy),
                           _as_3x4(to_cam.compose(cal.pose)), dst_k, (k.width, k.height),
                           dot, float(cfg.s), buf)
    shape = (k.height, k.width)
    return RenderOutput(buf.rgb.reshape(*shape, 3), buf.depth.reshape(shape),
                        buf.unit.reshape(shape), buf.coverage.reshape(shape),
                        buf.xyz.reshape(*shape, 3))


def preferred_unit(out: RenderOutput, cals: Sequence[UnitCalibration], cam: VirtualCamera) -> np.ndarray:
    """Per pixel, the covering unit with the largest ``v . i`` (-1 where uncovered)."""
    best = np.full(out.source_id.shape, -1, dtype=np.int16)
    best_dot = np.full(out.source_id.shape, -np.inf)
    for cal in sorted(cals, key=lambda c: c.unit_id):
        covers = ((out.coverage >> np.uint64(cal.unit_id)) & np.uint64(1)) == 1
        dot = cam.alignment(cal.optical_axis)
        better = covers & (dot > best_dot)
        best[better] = cal.unit_id
        best_dot[better] = dot[better]
    return best


def seam_metric(out: RenderOutput, cals: Sequence[UnitCalibration], cam: VirtualCamera,
                region: Optional[np.ndarray] = None) -> float:
    """Fraction of valid pixels not won by the best-aligned covering unit."""
    valid = out.valid if region is None else out.valid & region
    n = int(valid.sum())
    if n == 0:
        raise InvalidInputError("render has no valid pixels")
    best = preferred_unit(out, cals, cam)
    return float(np.count_nonzero(out.source_id[valid] != best[valid]) / n)


def overlap_mask(out: RenderOutput) -> np.ndarray:
    """Pixels covered by two or more units."""
    c = out.coverage
    return (c & (c - np.uint64(1))) != 0


# -- outputs -------------------------------------------------------------------


def write_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb, "RGB").save(path)


def write_ply(path, out: RenderOutput) -> int:
    """ASCII PLY of the fused (winning) points; returns the point count."""
    m = out.valid
    pts = out.xyz[m]
    cols = out.rgb[m]
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(pts)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue", "end_header",
    ]
    lines += [f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f} {c[0]} {c[1]} {c[2]}" for p, c in zip(pts, cols)]
    Path(path).write_text("\n".join(lines) + "\n")
    return len(pts)
