"""Pinhole camera model, rigid poses and capture-unit calibration.

Conventions: the world frame is right-handed, in meters, z up. Camera frames
have z forward, x right and y down. Depth is always camera-frame z, never ray
length. Pixel centers sit on integer coordinates, so pixel ``(c, r)`` covers
``[c - 0.5, c + 0.5) x [r - 0.5, r + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InvalidDepthError, InvalidInputError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("raster must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside raster")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "Intrinsics":
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def scaled(self, factor: float) -> "Intrinsics":
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor,
                          self.cy * factor, w, h)

    def contains(self, u, v):
        """Vectorized test for pixel-footprint membership."""
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping local (camera) coordinates to world coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ConfigError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ConfigError("rotation is not proper (det != +1)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        n = np.linalg.norm(right)
        if n < 1e-12:
            raise InvalidInputError("view direction is parallel to up vector")
        right /= n
        down = np.cross(fwd, right)
        R = np.column_stack([right, down, fwd])
        # re-orthonormalize so the 1e-9 invariant survives accumulated rounding
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, eye)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map local points (..., 3) to world."""
        return points @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) to local."""
        return (points - self.translation) @ self.rotation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))


@dataclass(frozen=True, eq=False)
class UnitCalibration:
    unit_id: int
    intrinsics: Intrinsics
    pose: Pose
    optical_axis: np.ndarray = field(init=False)

    def __post_init__(self):
        axis = self.pose.rotation[:, 2].copy()
        axis.setflags(write=False)
        object.__setattr__(self, "optical_axis", axis)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation


def _check_finite(*values):
    for x in values:
        if not np.all(np.isfinite(x)):
            raise InvalidInputError(f"non-finite input: {x!r}")


def project_point(p: Sequence[float], cal: UnitCalibration) -> Optional[Tuple[float, float, float]]:
    """Project a world point; returns ``(u, v, z)`` or None when out of frustum."""
    p = np.asarray(p, dtype=np.float64)
    _check_finite(p)
    x, y, z = cal.pose.apply_inverse(p)
    if z <= 0:
        return None
    k = cal.intrinsics
    u = k.fx * x / z + k.cx
    v = k.fy * y / z + k.cy
    if not k.contains(u, v):
        return None
    return float(u), float(v), float(z)


def back_project(u: float, v: float, z: float, cal: UnitCalibration) -> np.ndarray:
    _check_finite(u, v, z)
    if z <= 0:
        raise InvalidDepthError(f"depth must be positive, got {z}")
    k = cal.intrinsics
    if not k.contains(u, v):
        raise InvalidInputError(f"pixel ({u}, {v}) outside raster")
    local = np.array([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])
    return cal.pose.apply(local)


def project_points(points: np.ndarray, intr: Intrinsics, pose: Pose):
    """Vectorized projection. Returns ``(u, v, z)`` arrays; no frustum culling."""
    local = pose.apply_inverse(points)
    z = local[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * local[:, 0] / z + intr.cx
        v = intr.fy * local[:, 1] / z + intr.cy
    return u, v, z


def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z component, shape (H, W, 3)."""
    cols = (np.arange(intr.width) - intr.cx) / intr.fx
    rows = (np.arange(intr.height) - intr.cy) / intr.fy
    rays = np.empty((intr.height, intr.width, 3))
    rays[..., 0] = cols[None, :]
    rays[..., 1] = rows[:, None]
    rays[..., 2] = 1.0
    return rays


def back_project_depth(depth_m: np.ndarray, intr: Intrinsics, pose: Pose, valid=None):
    """Back-project every valid pixel of a depth raster (meters).

    Returns ``(points_world (N, 3), flat_pixel_index (N,))``.
    """
    if valid is None:
        valid = depth_m > 0
    rows, cols = np.nonzero(valid)
    z = depth_m[rows, cols]
    local = np.empty((z.size, 3))
    local[:, 0] = (cols - intr.cx) * z / intr.fx
    local[:, 1] = (rows - intr.cy) * z / intr.fy
    local[:, 2] = z
    return pose.apply(local), rows * intr.width + cols


# -- calibration file --------------------------------------------------------

_TOKENS_PER_UNIT = 1 + 9 + 3 + 6


def format_calibration(cals: Iterable[UnitCalibration]) -> str:
    blocks = []
    for cal in cals:
        R, t, k = cal.pose.rotation, cal.pose.translation, cal.intrinsics
        lines = [
            str(cal.unit_id),
            " ".join(repr(float(x)) for x in R.ravel()),
            " ".join(repr(float(x)) for x in t),
            f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}",
        ]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def parse_calibration(text: str) -> list[UnitCalibration]:
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or len(tokens) % _TOKENS_PER_UNIT:
        raise ConfigError(
            f"calibration file must hold blocks of {_TOKENS_PER_UNIT} values, got {len(tokens)}")
    cals = []
    for i in range(0, len(tokens), _TOKENS_PER_UNIT):
        blk = tokens[i:i + _TOKENS_PER_UNIT]
        try:
            unit_id = int(blk[0])
            R = np.array([float(x) for x in blk[1:10]]).reshape(3, 3)
            t = np.array([float(x) for x in blk[10:13]])
            fx, fy, cx, cy = (float(x) for x in blk[13:17])
            w, h = int(blk[17]), int(blk[18])
        except ValueError as exc:
            raise ConfigError(f"malformed calibration block {i // _TOKENS_PER_UNIT}: {exc}") from None
        cals.append(UnitCalibration(unit_id, Intrinsics(fx, fy, cx, cy, w, h), Pose(R, t)))
    return cals


def save_calibration(path, cals: Iterable[UnitCalibration]) -> None:
    Path(path).write_text(format_calibration(cals))


def load_calibration(path) -> list[UnitCalibration]:
    return parse_calibration(Path(path).read_text())
